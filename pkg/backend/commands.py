"""
Command implementations shared by the CLI and the HTTP service.

Every command takes validated configuration, writes its artifacts and
returns a small JSON-friendly summary.
"""

import logging
from pathlib import Path
from types import SimpleNamespace
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch

from config.schemas import Ablation, RunConfig, ScenarioConfig, dump_model, load_model, parse_model
from config.settings import Method, settings
from models.baselines import run_method
from models.diffusion_prior import (
    ControlSignal, GmmPrior, MotionNormalizer, condition_prior, default_noise_sigma, fit_gmm,
)
from utils.errors import ConfigError, ShapeError, StorageError
from utils.metrics import evaluate_solution
from utils.storage import (
    dataset_paths, load_arrays, load_dataset, load_ground_truth, load_prior, load_trajectory, run_dir_name,
    save_dataset, save_prior, save_solution, write_metrics, write_text, write_trace,
)
from utils.synthetic_world import GroundTruth, build_scenario, generate_corpus, observe, sample_training_control

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ABLATION_VARIANTS = {
    "coin": (Method.COIN, ()),
    "coin_no_control": (Method.COIN, (Ablation.NO_CONTROL,)),
    "coin_no_dynamic_control": (Method.COIN, (Ablation.NO_DYNAMIC_CONTROL,)),
    "coin_no_soft_inpaint": (Method.COIN, (Ablation.NO_SOFT_INPAINT,)),
    "coin_no_hsr": (Method.COIN, (Ablation.NO_HSR,)),
    "vanilla_sds": (Method.VANILLA_SDS, ()),
    "noise_opt": (Method.NOISE_OPT, ()),
    "guided": (Method.GUIDED, ()),
}
METRIC_COLUMNS = ("w_mpjpe", "wa_mpjpe", "w_rje", "pa_mpjpe", "accel", "rte", "roe", "ate", "ate_s", "cam_accel",
                  "scale_error")


def _scenario(scenario: Union[ScenarioConfig, PathLike, Dict[str, Any]]) -> ScenarioConfig:
    if isinstance(scenario, (str, Path)):
        return load_model(ScenarioConfig, scenario)
    return parse_model(ScenarioConfig, scenario)


def observation_seed(seed: int) -> int:
    return int(np.random.SeedSequence([seed, 1]).generate_state(1)[0])


def generate(config: ScenarioConfig, seed: int):
    """Ground truth and observations of a scenario, deterministic per seed."""
    truth = build_scenario(config, seed)
    return truth, observe(truth, config.noise, observation_seed(seed))


def cmd_gen(scenario: Union[ScenarioConfig, PathLike, Dict[str, Any]], seed: int,
            output_dir: Optional[PathLike] = None) -> Dict[str, Any]:
    """Write ground truth, observations and the scenario snapshot."""
    config = _scenario(scenario)
    output_dir = Path(output_dir) if output_dir else Path(settings.output_root) / "datasets" / f"{config.name}-seed{seed}"
    truth, obs = generate(config, seed)
    paths = save_dataset(output_dir, config, truth, obs)
    logger.info(f"Generated dataset '{config.name}' (seed {seed}) in {output_dir}")
    return {"directory": str(output_dir), "files": {k: str(v) for k, v in paths.items()}, "n_frames": truth.n_frames}


def _control_rmse(prior: GmmPrior, windows: np.ndarray, seed: int) -> float:
    """RMS error of the conditioned-prior mean on unobserved, non-contact channels."""
    rng = np.random.default_rng(seed)
    layout = prior.layout
    normalizer = prior.normalizer
    sigma = default_noise_sigma(prior)
    contact = np.zeros(layout.frame_dim, dtype=bool)
    contact[layout.contact] = True
    contact = np.tile(contact, layout.n_frames)
    errors = []
    for window in windows:
        values, mask = sample_training_control(window, layout, rng)
        offset = normalizer.horizontal_offset(values)
        ctrl = ControlSignal(normalizer.encode(values), mask, sigma)
        estimate = normalizer.decode(condition_prior(prior, ctrl).mean(), offset)
        hidden = (mask == 0) & ~contact
        if hidden.any():
            errors.append(np.mean((estimate[hidden] - window[hidden]) ** 2))
    return float(np.sqrt(np.mean(errors))) if errors else 0.0


def cmd_fit_prior(K: int, seed: int, output: PathLike, dataset: Optional[PathLike] = None,
                  corpus_size: int = 512, n_frames: int = 128, covariance_type: str = "diag",
                  n_eval: int = 8) -> Dict[str, Any]:
    """
    Fit the motion prior on a corpus archive or on a freshly generated corpus.

    A corpus archive holds a ``windows`` array (N, D) and ``n_frames`` in its
    metadata.
    """
    if dataset is not None:
        arrays, meta = load_arrays(dataset)
        if "windows" not in arrays:
            raise StorageError(f"{dataset} holds no 'windows' array")
        corpus = arrays["windows"]
        n_frames = int(meta.get("n_frames", n_frames))
    else:
        corpus = generate_corpus(corpus_size, n_frames, seed)
    normalizer = MotionNormalizer.fit(corpus, n_frames)
    prior = fit_gmm(corpus, K, seed, n_frames=n_frames, covariance_type=covariance_type, normalizer=normalizer)
    save_prior(prior, output)
    log_likelihood = prior.log_likelihood(normalizer.encode(corpus))
    held_out = generate_corpus(n_eval, n_frames, seed + 1) if n_eval > 0 else np.zeros((0, corpus.shape[1]))
    summary = {"output": str(output), "components": K, "windows": int(len(corpus)), "dim": prior.dim,
               "log_likelihood": log_likelihood, "iterations": len(prior.fit_trace),
               "control_rmse": _control_rmse(prior, held_out, seed)}
    logger.info(f"Fitted prior: K={K}, mean log-likelihood {log_likelihood:.4f}, "
                f"control RMSE {summary['control_rmse']:.4f}")
    return summary


def _resolve_prior(run: RunConfig) -> GmmPrior:
    path = run.prior or settings.default_prior
    if not path:
        raise ConfigError("no prior given and COIN_DEFAULT_PRIOR is not set")
    return load_prior(path)


def _resolve_data(run: RunConfig) -> tuple:
    """(scenario name, ground truth, observations, freshly generated?)"""
    if run.dataset:
        paths = dataset_paths(run.dataset)
        name = load_model(ScenarioConfig, paths["scenario"]).name if paths["scenario"].exists() else Path(run.dataset).name
        truth, obs = load_dataset(run.dataset)
        return name, truth, obs, None
    if run.scenario:
        config = load_model(ScenarioConfig, run.scenario)
        truth, obs = generate(config, run.scenario_seed)
        return config.name, truth, obs, config
    raise ConfigError("run needs a dataset directory or a scenario file")


def cmd_optimize(run: Union[RunConfig, Dict[str, Any]]) -> Dict[str, Any]:
    """Run the selected method and write the run directory."""
    run = parse_model(RunConfig, run)
    torch.set_num_threads(settings.torch_threads)
    name, truth, obs, generated = _resolve_data(run)
    prior = _resolve_prior(run)
    directory = Path(run.output_dir) if run.output_dir else Path(settings.output_root) / run_dir_name(run, name)
    write_text(directory / "run.json", dump_model(run))
    if generated is not None:
        save_dataset(directory / "dataset", generated, truth, obs)

    solution = run_method(obs, prior, run)
    write_trace(solution.trace, directory / "loss_trace.csv")
    save_solution(solution, directory)
    logger.info(f"Run {run.variant_name()} written to {directory}")
    return {"run_dir": str(directory), "method": solution.method, "scale": solution.scale,
            "windows": len(solution.windows), "iterations": len(solution.trace)}


def _ground_truth_for(run_dir: Path) -> GroundTruth:
    local = dataset_paths(run_dir / "dataset")["ground_truth"]
    if local.exists():
        return load_ground_truth(local)
    run = load_model(RunConfig, run_dir / "run.json")
    if run.dataset:
        return load_ground_truth(dataset_paths(run.dataset)["ground_truth"])
    raise StorageError(f"no ground truth found for {run_dir}")


def cmd_evaluate(run_dir: PathLike, ground_truth: Optional[PathLike] = None) -> Dict[str, float]:
    """Metrics of a run directory; writes metrics.csv and metrics.json next to the trajectory."""
    run_dir = Path(run_dir)
    trajectory = load_trajectory(run_dir / "trajectory.npz")
    truth = load_ground_truth(ground_truth) if ground_truth else _ground_truth_for(run_dir)
    solution = SimpleNamespace(motion=trajectory["motion"], centers=trajectory["cam_centers"],
                               scale=trajectory["scale"], beta=trajectory["beta"])
    try:
        report = evaluate_solution(solution, truth)
    except ShapeError as e:
        raise StorageError(f"trajectory and ground truth do not cover the same frames: {e}") from e
    write_metrics(report, run_dir)
    return report


def _variant_run(base: RunConfig, variant: str, seed: int) -> RunConfig:
    method, ablations = ABLATION_VARIANTS[variant]
    return base.model_copy(update={"method": method, "ablations": list(ablations), "seed": seed,
                                   "scenario_seed": seed})


def cmd_ablate(scenarios: Sequence[Union[ScenarioConfig, PathLike]], seeds: Sequence[int], prior: PathLike,
               output: PathLike, base: Optional[RunConfig] = None,
               variants: Sequence[str] = tuple(ABLATION_VARIANTS)) -> pd.DataFrame:
    """
    Run every variant on every scenario and seed.

    Writes ``<output>`` (median metric per variant, one row per variant) and
    ``<output stem>_runs.csv`` with every individual run.
    """
    unknown = sorted(set(variants) - set(ABLATION_VARIANTS))
    if unknown:
        raise ConfigError(f"unknown ablation variants: {unknown}")
    base = parse_model(RunConfig, base or {})
    torch.set_num_threads(settings.torch_threads)
    prior_model = load_prior(prior)
    rows: List[Dict[str, Any]] = []
    for scenario in scenarios:
        config = _scenario(scenario)
        for seed in seeds:
            truth, obs = generate(config, seed)
            for variant in variants:
                run = _variant_run(base, variant, seed)
                logger.info(f"Ablation: {config.name} seed {seed} variant {variant}")
                report = evaluate_solution(run_method(obs, prior_model, run), truth)
                rows.append({"scenario": config.name, "seed": seed, "variant": variant,
                             **{k: report[k] for k in METRIC_COLUMNS}})
    runs = pd.DataFrame(rows)
    table = (runs.groupby("variant", sort=False)[list(METRIC_COLUMNS)].median()
             .reindex(list(variants)).reset_index())
    output = Path(output)
    try:
        output.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(output, index=False, float_format="%.10g")
        runs.to_csv(output.with_name(f"{output.stem}_runs.csv"), index=False, float_format="%.10g")
    except OSError as e:
        raise StorageError(f"cannot write {output}: {e}") from e
    return table
