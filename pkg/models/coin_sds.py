"""
Controlled, soft-inpainted score distillation.

``coin_denoise`` turns the current motion estimate into a pseudo ground truth
by noising it and running a short DDIM chain with the observation-conditioned
denoiser, re-injecting the estimate on observed channels with a weight that
fades as the chain approaches t = 0. The SDS losses then regress the estimate
onto that frozen target.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple, Union

import numpy as np
import torch

from models.diffusion_prior import (
    ControlSignal, DEFAULT_SCHEDULE, Denoiser, DenoiserOutput, DiffusionSchedule, GmmDenoiser, GmmPrior,
    ddim_step, forward_sample,
)
from utils.errors import ConfigError, NumericalError, ShapeError
from utils.geometry import as_tensor

logger = logging.getLogger(__name__)

INPAINT_MODES = ("soft", "hard", "off")
PARALLEL_TOL = 1e-9


def mask_weight(t: float) -> float:
    """Observation weight max(0, (t - 0.5) / 0.5)."""
    return max(0.0, (float(t) - 0.5) / 0.5)


@dataclass
class SoftMask:
    """Binary observation mask M with per-channel confidences S."""
    mask: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=float)
        self.confidence = np.asarray(self.confidence, dtype=float)
        if self.mask.shape != self.confidence.shape:
            raise ShapeError("mask and confidence differ in shape")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ConfigError("mask entries must be 0 or 1")
        if np.any(self.confidence < 0) or np.any(self.confidence > 1):
            raise ConfigError("confidences must lie in [0, 1]")

    @classmethod
    def empty(cls, dim: int) -> "SoftMask":
        return cls(np.zeros(dim), np.zeros(dim))

    @classmethod
    def full(cls, dim: int) -> "SoftMask":
        return cls(np.ones(dim), np.ones(dim))

    def effective(self, t: float, mode: str = "soft") -> np.ndarray:
        """The blend weight M~ at time t."""
        if mode == "soft":
            return mask_weight(t) * self.confidence * self.mask
        if mode == "hard":
            return self.mask.copy()
        if mode == "off":
            return np.zeros_like(self.mask)
        raise ConfigError(f"unknown inpainting mode '{mode}'")


@dataclass
class SdsConfig:
    """Settings of the pseudo-ground-truth generator and the SDS weighting."""
    n_ddim_steps: int = 10
    omega: Union[float, Callable[[float], float]] = 1.0
    t_range: Tuple[float, float] = (0.02, 0.98)
    rng_seed: int = 0
    inpaint_mode: str = "soft"
    use_control: bool = True
    anneal: bool = False

    def __post_init__(self):
        if self.n_ddim_steps < 1:
            raise ConfigError("n_ddim_steps must be at least 1")
        t_min, t_max = self.t_range
        if not 0.0 < t_min <= t_max <= 1.0:
            raise ConfigError(f"t_range must satisfy 0 < t_min <= t_max <= 1, got {self.t_range}")
        if self.inpaint_mode not in INPAINT_MODES:
            raise ConfigError(f"unknown inpainting mode '{self.inpaint_mode}'")

    def omega_at(self, t: float) -> float:
        return float(self.omega(t)) if callable(self.omega) else float(self.omega)

    def sample_t(self, rng: np.random.Generator, progress: float = 0.0) -> float:
        """Draw t uniformly from t_range; with annealing t_max shrinks linearly towards t_min."""
        t_min, t_max = self.t_range
        if self.anneal:
            t_max = t_max - (t_max - t_min) * min(max(progress, 0.0), 1.0)
        return float(rng.uniform(t_min, t_max)) if t_max > t_min else float(t_min)


def sds_weight(t: float, cfg: SdsConfig, schedule: DiffusionSchedule = DEFAULT_SCHEDULE) -> float:
    """omega(t) sqrt(alpha_bar) / sqrt(1 - alpha_bar)."""
    ab = schedule.alpha_bar(t)
    if ab >= 1.0:
        raise NumericalError(f"SDS weight is singular at t={t} (alpha_bar = 1)")
    return cfg.omega_at(t) * float(np.sqrt(ab) / np.sqrt(1.0 - ab))


def _as_denoiser(model: Union[GmmPrior, Denoiser]) -> Denoiser:
    return GmmDenoiser(model) if isinstance(model, GmmPrior) else model


def coin_denoise(model: Union[GmmPrior, Denoiser], H, sm: SoftMask, cfg: SdsConfig, t: float, eps,
                 control: Optional[ControlSignal] = None,
                 obs_noise_sigma: Optional[np.ndarray] = None) -> Tuple[torch.Tensor, float]:
    """
    Multi-step controlled, soft-inpainted denoising of a noised copy of H.

    Args:
        model: Prior or denoiser in the space H lives in
        H: Current estimate (D,)
        sm: Observation mask and confidences
        cfg: Step count, inpainting mode and control switch
        t: Noise level of the starting latent
        eps: Noise of the starting latent
        control: Control signal; defaults to H itself on the masked channels
        obs_noise_sigma: Noise of the default control signal (required when it is built here)

    Returns:
        The pseudo ground truth and the time it was generated from
    """
    denoiser = _as_denoiser(model)
    H = as_tensor(H).detach()
    schedule = denoiser.schedule
    if cfg.use_control:
        if control is None and sm.mask.any():
            if obs_noise_sigma is None:
                raise ConfigError("obs_noise_sigma is required to build the default control signal")
            control = ControlSignal(H.numpy(), sm.mask, obs_noise_sigma)
        step_denoiser = denoiser.condition(control)
    else:
        step_denoiser = denoiser

    x = forward_sample(H, t, eps, schedule)
    n = cfg.n_ddim_steps
    for k in range(n):
        t_bar = t * (n - k) / n
        t_next = t * (n - k - 1) / n
        out = step_denoiser.denoise(x, t_bar)
        blend = torch.as_tensor(sm.effective(t_bar, cfg.inpaint_mode), dtype=H.dtype)
        h0 = blend * H + (1.0 - blend) * out.h0_hat
        ab = schedule.alpha_bar(t_bar)
        eps_bar = (x - float(np.sqrt(ab)) * h0) / float(np.sqrt(1.0 - ab))
        x = ddim_step(x, DenoiserOutput(h0, eps_bar), t_bar, t_next, schedule)
        if not torch.isfinite(x).all():
            raise NumericalError("non-finite latent in controlled denoising", step=k)
    return x, t


def coin_sds_loss_grad(H, H0_tilde, t: float, cfg: SdsConfig,
                       schedule: DiffusionSchedule = DEFAULT_SCHEDULE) -> Tuple[float, torch.Tensor]:
    """
    w(t) ||H - H~_0||^2 and its gradient with H~_0 held constant.

    Only the difference H - H~_0 is used, so the denoiser that produced the
    target is never differentiated.
    """
    H = as_tensor(H).detach()
    target = as_tensor(H0_tilde).detach()
    if H.shape != target.shape:
        raise ShapeError("motion and pseudo ground truth differ in shape")
    weight = sds_weight(t, cfg, schedule)
    diff = H - target
    return float(weight * (diff * diff).sum()), 2.0 * weight * diff


@dataclass
class VanillaSdsResult:
    loss: float
    grad: torch.Tensor
    eps_loss: float
    eps_grad: torch.Tensor
    h0_hat: torch.Tensor


def vanilla_sds_loss_grad(model: Union[GmmPrior, Denoiser], H, t: float, eps, cfg: SdsConfig) -> VanillaSdsResult:
    """
    Single-step SDS with the unconditional denoiser, in both of its forms.

    The clean-signal form regresses H onto the one-step estimate H^_0; the
    noise form penalizes omega ||eps^ - eps||^2 and uses the usual SDS gradient
    omega (eps^ - eps). The two gradients are parallel and this is checked.
    """
    denoiser = _as_denoiser(model)
    H = as_tensor(H).detach()
    eps = as_tensor(eps)
    schedule = denoiser.schedule
    x = forward_sample(H, t, eps, schedule)
    out = denoiser.denoise(x, t)
    loss, grad = coin_sds_loss_grad(H, out.h0_hat, t, cfg, schedule)
    omega = cfg.omega_at(t)
    residual = out.eps_hat - eps
    eps_loss = float(omega * (residual * residual).sum())
    eps_grad = omega * residual
    scale = float(torch.linalg.norm(eps) + torch.linalg.norm(out.eps_hat) + torch.linalg.norm(H))
    norm = float(torch.linalg.norm(grad) * torch.linalg.norm(eps_grad))
    # below this residual both forms are dominated by rounding
    if norm > 1e-300 and float(torch.linalg.norm(residual)) > 1e-6 * scale:
        cosine = float((grad * eps_grad).sum()) / norm
        if abs(cosine - 1.0) > PARALLEL_TOL:
            raise NumericalError(f"noise-form and clean-form SDS gradients disagree (cosine {cosine:.9f})")
    return VanillaSdsResult(loss, grad, eps_loss, eps_grad, out.h0_hat)


def dynamic_control_update(state, mask: np.ndarray, obs_noise_sigma: np.ndarray) -> ControlSignal:
    """Control signal whose values are the current motion iterate."""
    values = state.detach().cpu().numpy() if isinstance(state, torch.Tensor) else np.asarray(state, dtype=float)
    if not np.all(np.isfinite(values)):
        raise NumericalError("motion iterate is not finite")
    return ControlSignal(values.copy(), mask, obs_noise_sigma)


@dataclass
class DynamicControl:
    """
    Control state owned by an optimization loop.

    When ``dynamic`` is off the control stays pinned to the values it was
    created with, otherwise every update uses the latest iterate.
    """
    initial: np.ndarray
    mask: np.ndarray
    obs_noise_sigma: np.ndarray
    dynamic: bool = True
    updates: int = field(default=0, init=False)

    def update(self, state) -> ControlSignal:
        self.updates += 1
        if self.dynamic:
            return dynamic_control_update(state, self.mask, self.obs_noise_sigma)
        return dynamic_control_update(self.initial, self.mask, self.obs_noise_sigma)
