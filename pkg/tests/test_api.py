import importlib
import runpy
from pathlib import Path

import pytest
import uvicorn
from fastapi.testclient import TestClient

from backend.main import app
from coin_cli import main as cli_main


@pytest.fixture
def client():
    return TestClient(app)


def test_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json()["status"] == "healthy"


def test_status_lists_the_methods(client):
    body = client.get("/status").json()
    assert {"coin", "vanilla_sds", "noise_opt", "guided", "init_only"} <= set(body["methods"])


def test_generate_inline_scenario(client, tmp_path):
    payload = {"scenario": {"name": "api", "n_frames": 4, "scene": {"n_points": 5}}, "seed": 2,
               "output_dir": str(tmp_path / "data")}
    response = client.post("/generate", json=payload)
    assert response.status_code == 200
    body = response.json()
    assert body["success"] and body["result"]["n_frames"] == 4
    assert (tmp_path / "data" / "observations.npz").exists()


def test_invalid_run_config_is_unprocessable(client):
    response = client.post("/optimize", json={"method": "guided", "ablations": ["no_hsr"]})
    assert response.status_code == 422


def test_missing_run_directory_is_not_found(client, tmp_path):
    response = client.post("/evaluate", json={"run_dir": str(tmp_path / "absent")})
    assert response.status_code == 404


def _launch(monkeypatch, launcher, *args):
    calls = []
    monkeypatch.setattr(uvicorn, "run", lambda target, **kwargs: calls.append((target, kwargs)))
    monkeypatch.setenv("PORT", "8123")
    launcher(*args)
    assert len(calls) == 1
    return calls[0]


def test_module_entry_point_serves_the_package_app(monkeypatch):
    main_py = Path(__file__).resolve().parent.parent / "backend" / "main.py"
    target, kwargs = _launch(monkeypatch, runpy.run_path, str(main_py), None, "__main__")
    assert target == "backend.main:app"
    assert kwargs["port"] == 8123
    module_name, attr = target.split(":")
    assert getattr(importlib.import_module(module_name), attr) is app


def test_cli_serve_uses_the_same_app(monkeypatch):
    target, kwargs = _launch(monkeypatch, cli_main, ["serve", "--port", "8124"])
    assert target == "backend.main:app"
    assert kwargs["port"] == 8124
