import numpy as np
import pytest
import torch

from models.baselines import (
    GuidanceState, guidance_step, run_method, run_noise_optimization, run_vanilla_sds,
)
from models.coin_sds import SdsConfig, SoftMask, coin_denoise, vanilla_sds_loss_grad
from models.diffusion_prior import GmmDenoiser, GmmPrior, ddim_step
from models.global_optimizer import (
    StageConfig, WindowPlan, build_camera, initialize_window, optimize_sequence, prepare_window,
)
from utils.errors import ConfigError
from conftest import tiny_run


@pytest.fixture
def guidance(clean_scenario, tiny_prior):
    """Guidance state, camera, shape and horizontal offset of a single window."""
    _, obs = clean_scenario
    problem = prepare_window(obs, (0, obs.n_frames), tiny_prior.n_frames, WindowPlan(8, 2))
    variables, _ = initialize_window(problem, tiny_prior, seed=0)
    weights = {"l_2d": 1.0, "l_contact": 0.0}
    state = GuidanceState(problem, tiny_prior, weights)
    offset = tiny_prior.normalizer.horizontal_offset(variables.motion.reshape(-1))
    return state, build_camera(problem, variables), variables.beta, offset


def test_unguided_step_is_plain_ddim(guidance, tiny_prior):
    state, camera, beta, offset = guidance
    denoiser = GmmDenoiser(tiny_prior)
    x = torch.randn(tiny_prior.dim, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    x_next, h0, grad = guidance_step(state, denoiser, x, 0.6, 0.4, camera, beta, offset, scale=0.0)
    plain = denoiser.denoise(x, 0.6)
    torch.testing.assert_close(x_next, ddim_step(x, plain, 0.6, 0.4, denoiser.schedule), atol=0, rtol=0)
    torch.testing.assert_close(h0, plain.h0_hat, atol=0, rtol=0)
    assert grad.shape == x.shape


def test_guidance_lowers_the_data_loss(guidance, tiny_prior):
    state, camera, beta, offset = guidance
    denoiser = GmmDenoiser(tiny_prior)
    normalizer = tiny_prior.normalizer
    x = torch.randn(tiny_prior.dim, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    _, h0, grad = guidance_step(state, denoiser, x, 0.5, 0.3, camera, beta, offset, scale=0.0)
    scale = 1e-4 / float(grad.norm())
    _, guided, _ = guidance_step(state, denoiser, x, 0.5, 0.3, camera, beta, offset, scale=scale)
    torch.testing.assert_close(guided, h0 - scale * grad)

    def loss(h):
        with torch.no_grad():
            motion = normalizer.decode(h, offset).reshape(tiny_prior.n_frames, -1)
            return float(state.data_loss(motion, camera.detach(), beta))

    assert loss(guided) < loss(h0)


@pytest.mark.parametrize("method", ["guided", "vanilla_sds", "noise_opt"])
def test_run_method_dispatches_every_baseline(clean_scenario, tiny_prior, method):
    truth, obs = clean_scenario
    solution = run_method(obs, tiny_prior, tiny_run(method=method))
    assert solution.method == method
    assert solution.motion.shape == truth.motion.frames.shape
    assert np.isfinite(solution.motion).all()
    assert np.isfinite(solution.centers).all()
    assert solution.scale > 0
    assert solution.trace


def test_baseline_entry_points_override_the_method(clean_scenario, tiny_prior):
    _, obs = clean_scenario
    assert run_vanilla_sds(obs, tiny_prior, tiny_run()).method == "vanilla_sds"
    assert run_noise_optimization(obs, tiny_prior, tiny_run()).method == "noise_opt"


def test_guided_sampling_needs_a_motion_prior(clean_scenario):
    _, obs = clean_scenario
    with pytest.raises(ConfigError):
        run_method(obs, GmmPrior.standard_normal(4), tiny_run(method="guided"))


def test_controlled_pseudo_targets_vary_less_than_single_step_estimates():
    prior = GmmPrior(np.array([0.4, 0.6]), np.array([[1.0, -1.0, 0.5, 0.0], [-0.5, 1.5, -1.0, 1.0]]),
                     np.array([[0.5, 0.8, 0.3, 1.0], [0.7, 0.4, 0.9, 0.6]]))
    H = torch.tensor([0.3, -0.7, 1.1, 0.2], dtype=torch.float64)
    cfg = SdsConfig(n_ddim_steps=5)
    rng = np.random.default_rng(0)
    generator = torch.Generator().manual_seed(0)
    sigma = np.full(4, 0.1)
    coin, vanilla = [], []
    for _ in range(100):
        t = cfg.sample_t(rng)
        eps = torch.randn(4, generator=generator, dtype=torch.float64)
        target, _ = coin_denoise(prior, H, SoftMask.full(4), cfg, t, eps, obs_noise_sigma=sigma)
        coin.append(target.numpy())
        vanilla.append(vanilla_sds_loss_grad(prior, H, t, eps, cfg).h0_hat.numpy())
    assert np.var(coin, axis=0).sum() < np.var(vanilla, axis=0).sum()


def test_noise_optimization_latent_decodes_to_the_initial_motion(clean_scenario, tiny_prior):
    _, obs = clean_scenario
    stages = [StageConfig(1, 0, 0.01)]
    initial = optimize_sequence(obs, tiny_prior, tiny_run(method="init_only"))
    fitted = optimize_sequence(obs, tiny_prior, tiny_run(method="noise_opt"), stages=stages)
    assert fitted.windows[0].variables["latent"].shape == (tiny_prior.dim,)
    np.testing.assert_allclose(fitted.motion, initial.motion, atol=1e-4)
