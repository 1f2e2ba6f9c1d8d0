import numpy as np
import pytest
import torch

from models.diffusion_prior import (
    ControlSignal, DenoiserOutput, DiffusionSchedule, GmmPrior, MotionLayout, MotionNormalizer, MotionWindow,
    condition_prior, ddim_invert, ddim_sample, ddim_step, ddim_times, ddpm_sample, decode_latent, denoise_controlled,
    denoise_exact, fit_gmm, fit_latent, forward_sample, sample_gmm,
)
from utils.errors import ConfigError, DomainError, OrderingError, ShapeError


def two_component_prior(covariance_type="diag"):
    means = np.array([[2.0, 1.0, 0.0, -1.0], [-1.0, 0.5, 1.0, 2.0]])
    variances = np.array([[0.5, 1.0, 0.8, 0.3], [1.0, 0.4, 0.6, 0.9]])
    covs = variances if covariance_type == "diag" else np.stack([np.diag(v) for v in variances])
    return GmmPrior(np.array([0.3, 0.7]), means, covs, covariance_type=covariance_type)


def monte_carlo_posterior_mean(prior, x_t, t, n, seed, log_extra=None):
    """Importance-weighted E[H_0 | H_t] from exact prior draws."""
    draws = sample_gmm(prior, n, np.random.default_rng(seed))
    ab = prior.schedule.alpha_bar(t)
    log_w = -0.5 * ((x_t - np.sqrt(ab) * draws) ** 2).sum(1) / (1.0 - ab)
    if log_extra is not None:
        log_w = log_w + log_extra(draws)
    w = np.exp(log_w - log_w.max())
    return (w[:, None] * draws).sum(0) / w.sum()


# --- schedule ----------------------------------------------------------------

def test_schedule_endpoints_and_monotonicity():
    schedule = DiffusionSchedule()
    assert schedule.alpha_bar(0.0) == 1.0
    assert 0.0 < schedule.alpha_bar(1.0) <= 0.01
    values = [schedule.alpha_bar(t) for t in np.linspace(0.0, 1.0, 101)]
    assert np.all(np.diff(values) < 0)
    assert schedule.alpha_bar(0.25) > schedule.alpha_bar(0.75)


@pytest.mark.parametrize("t", [-0.1, 1.5])
def test_schedule_rejects_times_outside_unit_interval(t):
    with pytest.raises(DomainError):
        DiffusionSchedule().alpha_bar(t)


def test_schedule_time_lookup_inverts_alpha_bar():
    schedule = DiffusionSchedule()
    assert schedule.time_for(schedule.alpha_bar(0.3)) == pytest.approx(0.3, abs=1e-9)


def test_linear_schedule_is_valid():
    schedule = DiffusionSchedule(kind="linear")
    assert schedule.alpha_bar(0.0) == 1.0
    assert 0.0 < schedule.alpha_bar(1.0) < schedule.alpha_bar(0.5) < 1.0


# --- motion representation ---------------------------------------------------

def test_motion_layout_channels():
    layout = MotionLayout(n_frames=5, n_joints=4)
    assert layout.frame_dim == 22
    assert layout.dim == 110
    assert layout.contact == slice(18, 22)
    groups = layout.channel_groups()
    assert list(groups[:22]).count("pose") == 12
    with pytest.raises(ShapeError):
        layout.unflatten(np.zeros(109))


def test_motion_window_parts_round_trip():
    T = 6
    rng = np.random.default_rng(0)
    translation, orientation = rng.normal(size=(T, 3)), rng.normal(size=(T, 3))
    pose, logits = rng.normal(size=(T, 4, 3)), rng.normal(size=(T, 4))
    window = MotionWindow.from_parts(translation, orientation, pose, logits)
    np.testing.assert_array_equal(window.translation, translation)
    np.testing.assert_array_equal(window.pose, pose)
    np.testing.assert_array_equal(window.contact_logits, logits)
    again = MotionWindow.from_flat(window.flatten(), T)
    np.testing.assert_array_equal(again.frames, window.frames)


def test_motion_window_rejects_wrong_width():
    with pytest.raises(ShapeError):
        MotionWindow(np.zeros((4, 21)))


def test_normalizer_is_invertible_and_translation_invariant(tiny_corpus):
    normalizer = MotionNormalizer.fit(tiny_corpus, 8)
    window = tiny_corpus[3]
    encoded = normalizer.encode(window)
    decoded = normalizer.decode(encoded, normalizer.horizontal_offset(window))
    np.testing.assert_allclose(decoded, window, atol=1e-12)

    shifted = window.copy()
    frames = MotionLayout(8).unflatten(shifted)
    frames[:, 0] += 3.0
    frames[:, 1] -= 1.5
    np.testing.assert_allclose(normalizer.encode(shifted), encoded, atol=1e-12)


def test_normalizer_works_on_tensors(tiny_corpus):
    normalizer = MotionNormalizer.fit(tiny_corpus, 8)
    window = tiny_corpus[0]
    encoded = normalizer.encode(torch.as_tensor(window, dtype=torch.float64))
    np.testing.assert_allclose(encoded.numpy(), normalizer.encode(window), atol=1e-12)


# --- prior -----------------------------------------------------------------

def test_prior_validates_simplex_and_shapes():
    with pytest.raises(ConfigError):
        GmmPrior(np.array([0.5, 0.6]), np.zeros((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        GmmPrior(np.array([1.0]), np.zeros((1, 3)), np.ones((1, 2)))
    with pytest.raises(ShapeError):
        GmmPrior(np.array([1.0]), np.zeros((1, 3)), np.ones((1, 3)), n_frames=2)


def test_sample_gmm_matches_mixture_mean():
    prior = two_component_prior()
    draws = sample_gmm(prior, 20000, np.random.default_rng(0))
    standard_error = draws.std(axis=0) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - prior.mean()) < 4.0 * standard_error)


# --- forward process and denoising -------------------------------------------

def test_forward_sample_special_cases():
    H = torch.arange(4, dtype=torch.float64)
    eps = torch.ones(4, dtype=torch.float64)
    schedule = DiffusionSchedule()
    torch.testing.assert_close(forward_sample(H, 0.0, eps), H)
    torch.testing.assert_close(forward_sample(H, 0.4, torch.zeros(4, dtype=torch.float64)),
                               np.sqrt(schedule.alpha_bar(0.4)) * H)
    with pytest.raises(ShapeError):
        forward_sample(H, 0.4, torch.zeros(3, dtype=torch.float64))


def test_forward_sample_moments(rng):
    H = torch.tensor([1.0, -2.0], dtype=torch.float64)
    t = 0.6
    ab = DiffusionSchedule().alpha_bar(t)
    eps = torch.as_tensor(rng.standard_normal((100000, 2)))
    samples = forward_sample(H.expand(100000, 2), t, eps).numpy()
    se_mean = np.sqrt((1.0 - ab) / len(samples))
    assert np.all(np.abs(samples.mean(0) - np.sqrt(ab) * H.numpy()) < 3.0 * se_mean)
    se_var = (1.0 - ab) * np.sqrt(2.0 / len(samples))
    assert np.all(np.abs(samples.var(0) - (1.0 - ab)) < 3.0 * se_var)


def test_unit_gaussian_denoiser_is_linear():
    prior = GmmPrior.standard_normal(3)
    x = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    t = 0.45
    ab = prior.schedule.alpha_bar(t)
    out = denoise_exact(prior, x, t)
    torch.testing.assert_close(out.h0_hat, np.sqrt(ab) * x)
    torch.testing.assert_close(out.eps_hat, np.sqrt(1.0 - ab) * x)


def test_denoiser_identity_at_time_zero():
    prior = two_component_prior()
    x = torch.tensor([0.1, 0.2, 0.3, 0.4], dtype=torch.float64)
    out = denoise_exact(prior, x, 0.0)
    torch.testing.assert_close(out.h0_hat, x)
    assert torch.count_nonzero(out.eps_hat) == 0


def test_symmetric_mixture_denoises_origin_to_origin():
    prior = GmmPrior(np.array([0.5, 0.5]), np.array([[1.0, -2.0], [-1.0, 2.0]]), np.ones((2, 2)))
    out = denoise_exact(prior, torch.zeros(2, dtype=torch.float64), 0.5)
    torch.testing.assert_close(out.h0_hat, torch.zeros(2, dtype=torch.float64), atol=1e-12, rtol=0)


@pytest.mark.parametrize("t", [0.1, 0.5, 0.9])
def test_reconstruction_identity(t):
    prior = two_component_prior()
    x = torch.tensor([0.5, 0.2, -0.3, 0.8], dtype=torch.float64)
    ab = prior.schedule.alpha_bar(t)
    out = denoise_exact(prior, x, t)
    torch.testing.assert_close(np.sqrt(ab) * out.h0_hat + np.sqrt(1.0 - ab) * out.eps_hat, x, atol=1e-9, rtol=0)


def test_full_and_diagonal_covariances_agree():
    x = torch.tensor([0.5, 0.2, -0.3, 0.8], dtype=torch.float64)
    diag = denoise_exact(two_component_prior("diag"), x, 0.6)
    full = denoise_exact(two_component_prior("full"), x, 0.6)
    torch.testing.assert_close(diag.h0_hat, full.h0_hat, atol=1e-10, rtol=0)


def test_posterior_mean_contracts_to_prior_mean_at_full_noise():
    prior = two_component_prior()
    x = torch.full((4,), 0.1, dtype=torch.float64)
    out = denoise_exact(prior, x, 1.0)
    np.testing.assert_allclose(out.h0_hat.numpy(), prior.mean(), atol=1e-3)


def test_denoiser_matches_monte_carlo_posterior_mean():
    prior = two_component_prior()
    x_t = np.array([0.5, 0.2, -0.3, 0.8])
    t = 0.7
    oracle = monte_carlo_posterior_mean(prior, x_t, t, 200000, seed=0)
    estimate = denoise_exact(prior, torch.as_tensor(x_t), t).h0_hat.numpy()
    assert np.linalg.norm(estimate - oracle) / np.linalg.norm(oracle) < 0.02


@pytest.mark.slow
def test_denoiser_matches_monte_carlo_on_random_priors():
    rng = np.random.default_rng(7)
    for trial in range(50):
        k, dim = int(rng.integers(1, 4)), int(rng.integers(2, 9))
        weights = rng.dirichlet(np.ones(k))
        prior = GmmPrior(weights, rng.normal(scale=2.0, size=(k, dim)), rng.uniform(0.3, 1.5, size=(k, dim)))
        t = float(rng.uniform(0.5, 0.9))
        x_t = rng.normal(size=dim)
        oracle = monte_carlo_posterior_mean(prior, x_t, t, 1000000, seed=trial)
        estimate = denoise_exact(prior, torch.as_tensor(x_t), t).h0_hat.numpy()
        assert np.linalg.norm(estimate - oracle) / np.linalg.norm(oracle) < 0.01


# --- conditioning ------------------------------------------------------------

def test_condition_prior_with_empty_mask_returns_prior():
    prior = two_component_prior()
    ctrl = ControlSignal(np.zeros(4), np.zeros(4), np.ones(4))
    assert condition_prior(prior, ctrl) is prior
    assert condition_prior(prior, None) is prior


def test_noiseless_full_observation_concentrates():
    prior = two_component_prior()
    values = np.array([0.4, -0.1, 0.7, 1.2])
    sigma = 1e-6
    conditioned = condition_prior(prior, ControlSignal(values, np.ones(4), np.full(4, sigma)))
    np.testing.assert_allclose(conditioned.means, np.broadcast_to(values, (2, 4)), atol=1e-3)
    assert conditioned.covariances.sum(axis=1).max() <= sigma ** 2 * 4 * (1 + 1e-6)


def test_controlled_denoiser_follows_control():
    prior = two_component_prior()
    values = np.array([0.4, -0.1, 0.7, 1.2])
    ctrl = ControlSignal(values, np.ones(4), np.full(4, 1e-4))
    out = denoise_controlled(prior, torch.tensor([3.0, -3.0, 3.0, -3.0], dtype=torch.float64), 0.8, ctrl)
    np.testing.assert_allclose(out.h0_hat.numpy(), values, atol=1e-2)


def test_observation_reweights_components():
    prior = GmmPrior(np.array([0.5, 0.5]), np.array([[-5.0, 0.0], [5.0, 0.0]]), np.ones((2, 2)))
    conditioned = condition_prior(prior, ControlSignal(np.array([5.0, 0.0]), np.array([1.0, 0.0]), np.ones(2)))
    assert conditioned.weights[1] > 0.999


def test_diagonal_and_full_conditioning_agree():
    mask = np.array([1.0, 0.0, 1.0, 0.0])
    ctrl = ControlSignal(np.array([0.3, 0.0, -0.4, 0.0]), mask, np.full(4, 0.5))
    diag = condition_prior(two_component_prior("diag"), ctrl)
    full = condition_prior(two_component_prior("full"), ctrl)
    np.testing.assert_allclose(diag.weights, full.weights, atol=1e-12)
    np.testing.assert_allclose(diag.means, full.means, atol=1e-12)
    np.testing.assert_allclose(diag.covariances, np.diagonal(full.covariances, axis1=1, axis2=2), atol=1e-12)


def test_controlled_denoiser_matches_monte_carlo_oracle():
    prior = two_component_prior()
    mask = np.array([1.0, 0.0, 1.0, 0.0])
    values = np.array([0.3, 0.0, -0.4, 0.0])
    sigma = 0.5
    ctrl = ControlSignal(values, mask, np.full(4, sigma))
    x_t = np.array([0.5, 0.2, -0.3, 0.8])
    t = 0.7
    obs = mask == 1

    def observation_log_likelihood(draws):
        return -0.5 * ((draws[:, obs] - values[obs]) ** 2).sum(1) / sigma ** 2

    oracle = monte_carlo_posterior_mean(prior, x_t, t, 200000, seed=1, log_extra=observation_log_likelihood)
    estimate = denoise_controlled(prior, torch.as_tensor(x_t), t, ctrl).h0_hat.numpy()
    assert np.linalg.norm(estimate - oracle) / np.linalg.norm(oracle) < 0.03


def test_control_signal_validation():
    with pytest.raises(ConfigError):
        ControlSignal(np.zeros(3), np.array([0.0, 0.5, 1.0]), np.ones(3))
    with pytest.raises(ConfigError):
        ControlSignal(np.zeros(3), np.ones(3), np.zeros(3))
    with pytest.raises(ShapeError):
        ControlSignal(np.zeros(3), np.ones(2), np.ones(3))


# --- samplers --------------------------------------------------------------

def test_ddim_step_ordering_and_endpoint():
    prior = two_component_prior()
    x = torch.tensor([0.5, 0.2, -0.3, 0.8], dtype=torch.float64)
    out = denoise_exact(prior, x, 0.5)
    with pytest.raises(OrderingError):
        ddim_step(x, out, 0.5, 0.5)
    torch.testing.assert_close(ddim_step(x, out, 0.5, 0.0), out.h0_hat, atol=0, rtol=0)


def test_ddim_step_is_consistent_with_forward_process():
    schedule = DiffusionSchedule()
    H0 = torch.tensor([1.0, -0.5, 2.0], dtype=torch.float64)
    eps = torch.tensor([0.3, 0.1, -0.7], dtype=torch.float64)
    x = forward_sample(H0, 0.8, eps, schedule)
    nxt = ddim_step(x, DenoiserOutput(H0, eps), 0.8, 0.3, schedule)
    torch.testing.assert_close(nxt, forward_sample(H0, 0.3, eps, schedule))


def test_ddim_chain_on_unit_gaussian_composes_affine_maps():
    prior = GmmPrior.standard_normal(5)
    z = torch.tensor([0.4, -1.0, 2.2, 0.0, -0.3], dtype=torch.float64)
    times = ddim_times(1.0, 10)
    coefficient = 1.0
    for t, t_next in zip(times[:-1], times[1:]):
        ab, ab_next = prior.schedule.alpha_bar(t), prior.schedule.alpha_bar(t_next)
        coefficient *= np.sqrt(ab * ab_next) + np.sqrt((1.0 - ab) * (1.0 - ab_next))
    result = ddim_sample(prior.denoiser(), z, 1.0, 10)
    torch.testing.assert_close(result, coefficient * z, atol=1e-12, rtol=1e-12)


def test_ddim_times_grid():
    assert ddim_times(0.5, 4) == [0.5, 0.375, 0.25, 0.125, 0.0]
    with pytest.raises(ConfigError):
        ddim_times(1.0, 0)


def test_ddim_inversion_is_linear_under_a_gaussian_prior():
    denoiser = GmmPrior.standard_normal(4).denoiser()
    x0 = torch.tensor([0.5, -1.0, 0.25, 2.0], dtype=torch.float64)
    latent = ddim_invert(denoiser, x0, 8)
    assert torch.isfinite(latent).all()
    torch.testing.assert_close(ddim_invert(denoiser, 2.0 * x0, 8), 2.0 * latent)
    torch.testing.assert_close(ddim_invert(denoiser, torch.zeros(4, dtype=torch.float64), 8),
                               torch.zeros(4, dtype=torch.float64), atol=0, rtol=0)
    torch.testing.assert_close(ddim_invert(denoiser, x0, 8), latent, atol=0, rtol=0)


def test_latent_fit_recovers_a_known_latent():
    denoiser = GmmPrior.standard_normal(3).denoiser()
    z_true = torch.tensor([0.3, -0.5, 1.0], dtype=torch.float64)
    target = decode_latent(denoiser, z_true, 5)
    z, residual = fit_latent(denoiser, target, 5, init=ddim_invert(denoiser, target, 5))
    assert residual < 1e-12
    torch.testing.assert_close(z, z_true, atol=1e-6, rtol=0)


def test_ddpm_sample_is_seeded_and_lands_on_point_mass():
    prior = GmmPrior(np.ones(1), np.array([[1.0, -2.0, 0.5]]), np.full((1, 3), 1e-10))
    start = torch.zeros(3, dtype=torch.float64)
    first = ddpm_sample(prior.denoiser(), start, 20, torch.Generator().manual_seed(3))
    second = ddpm_sample(prior.denoiser(), start, 20, torch.Generator().manual_seed(3))
    torch.testing.assert_close(first, second, atol=0, rtol=0)
    np.testing.assert_allclose(first.numpy(), prior.means[0], atol=1e-4)


def test_ddpm_and_exact_draws_agree_in_mean():
    prior = GmmPrior(np.array([0.4, 0.6]), np.array([[2.0, -1.0], [-1.0, 1.0]]), np.array([[0.3, 0.5], [0.6, 0.2]]))
    n = 4000
    exact = sample_gmm(prior, n, np.random.default_rng(0))
    generator = torch.Generator().manual_seed(0)
    start = torch.randn((n, 2), generator=generator, dtype=torch.float64)
    chain = ddpm_sample(prior.denoiser(), start, 100, generator).numpy()
    se = np.sqrt(exact.var(0) / n + chain.var(0) / n)
    assert np.all(np.abs(exact.mean(0) - chain.mean(0)) < 4.0 * se)


# --- EM ----------------------------------------------------------------------

def test_fit_gmm_single_component_is_closed_form(rng):
    data = rng.normal(loc=[1.0, -2.0, 0.5], scale=[1.0, 2.0, 0.5], size=(200, 3))
    prior = fit_gmm(data, 1, seed=0)
    np.testing.assert_allclose(prior.means[0], data.mean(0), atol=1e-9)
    np.testing.assert_allclose(prior.covariances[0], data.var(0), atol=1e-9)


def test_fit_gmm_recovers_separated_clusters(rng):
    true_means = np.array([[-5.0, -3.0], [5.0, 4.0]])
    data = np.concatenate([rng.normal(m, 0.5, size=(300, 2)) for m in true_means])
    prior = fit_gmm(data, 2, seed=1)
    means = prior.means[np.argsort(prior.means[:, 0])]
    np.testing.assert_allclose(means, true_means, rtol=0.05)
    assert np.all(np.diff(prior.fit_trace) >= -1e-9)


def test_fit_gmm_is_deterministic_per_seed(tiny_corpus):
    first = fit_gmm(tiny_corpus, 2, seed=4, n_frames=8)
    second = fit_gmm(tiny_corpus, 2, seed=4, n_frames=8)
    np.testing.assert_array_equal(first.means, second.means)
    assert first.is_motion_prior and first.layout.dim == tiny_corpus.shape[1]


def test_fit_gmm_floors_singular_covariances(caplog):
    data = np.column_stack([np.linspace(0.0, 1.0, 40), np.zeros(40)])
    prior = fit_gmm(data, 1, seed=0, cov_floor=1e-4)
    assert prior.covariances[0, 1] == pytest.approx(1e-4)
    prior.check_floor()
    assert "floored" in caplog.text


def test_fit_gmm_rejects_small_datasets():
    with pytest.raises(ConfigError):
        fit_gmm(np.zeros((15, 2)), 2, seed=0)
    with pytest.raises(ConfigError):
        fit_gmm([], 1, seed=0)
