import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from backend.commands import ABLATION_VARIANTS, cmd_ablate, cmd_evaluate, cmd_fit_prior, cmd_gen, cmd_optimize
from config.schemas import dump_model
from config.settings import settings
from utils.errors import ConfigError, StorageError
from utils.storage import load_prior, save_prior, write_text
from conftest import scenario_config, tiny_run


@pytest.fixture
def scenario_file(tmp_path):
    return write_text(tmp_path / "walk.json", dump_model(scenario_config(n_frames=12, name="walk")))


@pytest.fixture
def prior_file(tmp_path, tiny_prior):
    return save_prior(tiny_prior, tmp_path / "prior.npz")


def test_generation_is_deterministic(tmp_path, scenario_file):
    first = cmd_gen(scenario_file, 5, tmp_path / "a")
    second = cmd_gen(scenario_file, 5, tmp_path / "b")
    assert first["n_frames"] == 12
    for name in ("ground_truth", "observations", "scenario"):
        a, b = first["files"][name], second["files"][name]
        assert Path(a).read_bytes() == Path(b).read_bytes(), name


def test_generation_accepts_inline_scenarios(tmp_path):
    result = cmd_gen({"name": "inline", "n_frames": 4, "scene": {"n_points": 5}}, 0, tmp_path / "inline")
    assert result["n_frames"] == 4
    with pytest.raises(ConfigError):
        cmd_gen({"n_frames": 1}, 0, tmp_path / "bad")


def test_fit_prior_summary(tmp_path):
    summary = cmd_fit_prior(2, 0, tmp_path / "prior.json", corpus_size=24, n_frames=8, n_eval=2)
    assert summary["components"] == 2
    assert summary["windows"] == 24
    assert summary["dim"] == 8 * 22
    assert np.isfinite(summary["log_likelihood"])
    assert summary["control_rmse"] >= 0.0
    prior = load_prior(tmp_path / "prior.json")
    assert prior.n_components == 2 and prior.n_frames == 8


def test_optimize_then_evaluate(tmp_path, scenario_file, prior_file):
    run_dir = tmp_path / "run"
    run = tiny_run(scenario=str(scenario_file), prior=str(prior_file), output_dir=str(run_dir))
    result = cmd_optimize(run)
    assert result["windows"] == 2
    assert result["iterations"] == 12
    for name in ("run.json", "loss_trace.csv", "trajectory.npz", "variables.npz", "dataset/ground_truth.npz"):
        assert (run_dir / name).exists(), name
    trace = pd.read_csv(run_dir / "loss_trace.csv")
    assert len(trace) == 12 and {"stage", "total", "scale"} <= set(trace.columns)

    report = cmd_evaluate(run_dir)
    assert {"w_mpjpe", "ate_s", "scale_error"} <= set(report)
    assert all(np.isfinite(v) for v in report.values())
    assert json.loads((run_dir / "metrics.json").read_text()) == pytest.approx(report)


def test_optimize_from_a_generated_dataset(tmp_path, scenario_file, prior_file):
    cmd_gen(scenario_file, 1, tmp_path / "data")
    run = tiny_run(dataset=str(tmp_path / "data"), prior=str(prior_file), output_dir=str(tmp_path / "run"),
                   method="init_only")
    assert cmd_optimize(run.model_dump(mode="json"))["iterations"] == 0
    assert not (tmp_path / "run" / "dataset").exists()
    assert "w_mpjpe" in cmd_evaluate(tmp_path / "run")


def test_evaluate_rejects_a_mismatched_ground_truth(tmp_path, scenario_file, prior_file):
    run = tiny_run(scenario=str(scenario_file), prior=str(prior_file), output_dir=str(tmp_path / "run"),
                   method="init_only")
    cmd_optimize(run)
    short = write_text(tmp_path / "short.json", dump_model(scenario_config(n_frames=8)))
    other = cmd_gen(short, 0, tmp_path / "short")
    with pytest.raises(StorageError):
        cmd_evaluate(tmp_path / "run", other["files"]["ground_truth"])
    with pytest.raises(StorageError):
        cmd_evaluate(tmp_path / "missing")


def test_optimize_needs_a_prior_and_data(tmp_path, scenario_file, monkeypatch):
    monkeypatch.setitem(settings.config, "default_prior", "")
    with pytest.raises(ConfigError):
        cmd_optimize(tiny_run(scenario=str(scenario_file), output_dir=str(tmp_path / "run")))
    with pytest.raises(ConfigError):
        cmd_optimize(tiny_run(prior="prior.npz"))
    with pytest.raises(ConfigError):
        cmd_optimize({"method": "guided", "ablations": ["no_hsr"]})


def test_ablation_table(tmp_path, scenario_file, prior_file):
    out = tmp_path / "ablation.csv"
    table = cmd_ablate([scenario_file], [0], prior_file, out, tiny_run(), variants=["coin", "coin_no_hsr"])
    assert table["variant"].tolist() == ["coin", "coin_no_hsr"]
    assert np.isfinite(table["w_mpjpe"]).all()
    assert pd.read_csv(out)["variant"].tolist() == ["coin", "coin_no_hsr"]
    assert len(pd.read_csv(tmp_path / "ablation_runs.csv")) == 2
    with pytest.raises(ConfigError):
        cmd_ablate([scenario_file], [0], prior_file, out, variants=["coin_no_prior"])


def test_every_ablation_variant_is_a_valid_run():
    for name, (method, ablations) in ABLATION_VARIANTS.items():
        run = tiny_run(method=method, ablations=list(ablations))
        expected = name if not ablations else "coin_" + ablations[0].value
        assert run.variant_name() == expected
