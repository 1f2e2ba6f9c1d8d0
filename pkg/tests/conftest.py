"""Shared fixtures: tiny motion priors, short scenarios and seeded generators."""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.append(str(Path(__file__).parent.parent))

from config.schemas import NoiseConfig, OptimConfig, RunConfig, ScenarioConfig, SceneConfig, SdsSettings
from models.diffusion_prior import MotionNormalizer, fit_gmm
from utils.synthetic_world import build_scenario, generate_corpus, observe

TINY_FRAMES = 8


def pytest_collection_modifyitems(config, items):
    if os.getenv("COIN_RUN_SLOW", "").strip().lower() in ("1", "true", "yes", "on"):
        return
    skip_slow = pytest.mark.skip(reason="set COIN_RUN_SLOW=1 to run benchmark checks")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(48, TINY_FRAMES, seed=0)


@pytest.fixture(scope="session")
def tiny_prior(tiny_corpus):
    """Two-component motion prior over 8-frame windows."""
    normalizer = MotionNormalizer.fit(tiny_corpus, TINY_FRAMES)
    return fit_gmm(tiny_corpus, 2, seed=0, n_frames=TINY_FRAMES, normalizer=normalizer)


def scenario_config(n_frames: int = TINY_FRAMES, noise: NoiseConfig = None, scale_true: float = 1.0,
                    name: str = "tiny") -> ScenarioConfig:
    return ScenarioConfig(name=name, n_frames=n_frames, scale_true=scale_true,
                          noise=noise if noise is not None else NoiseConfig.zero(),
                          scene=SceneConfig(n_points=40))


@pytest.fixture
def clean_config():
    return scenario_config()


@pytest.fixture
def clean_scenario(clean_config):
    """Noise-free single-window scenario: (ground truth, observations)."""
    truth = build_scenario(clean_config, seed=3)
    return truth, observe(truth, clean_config.noise, seed=4)


@pytest.fixture
def noisy_scenario():
    """Twelve frames with the default noise model; two windows of the tiny prior."""
    config = scenario_config(n_frames=12, noise=NoiseConfig(), name="noisy")
    truth = build_scenario(config, seed=5)
    return truth, observe(truth, config.noise, seed=6)


def tiny_run(**updates) -> RunConfig:
    base = {
        "optim": OptimConfig(stage_steps=(2, 2, 2), window_frames=TINY_FRAMES, overlap=2),
        "sds": SdsSettings(n_ddim_steps=3),
        "noise_opt_steps": 3,
        "ddpm_steps": 5,
    }
    base.update(updates)
    return RunConfig(**base)


@pytest.fixture
def run_config():
    return tiny_run()
