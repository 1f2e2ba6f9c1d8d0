"""
Diffusion schedule, motion representation and the Gaussian-mixture motion prior.

The prior stands in for a trained diffusion model: because every component is
Gaussian, the posterior mean E[H_0 | H_t] is available in closed form, both
unconditionally and after conditioning on partial, noisy observations.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit, logsumexp

from config.settings import DEFAULT_OBS_NOISE
from utils.errors import ConfigError, DomainError, NumericalError, OrderingError, ShapeError
from utils.geometry import as_tensor

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, torch.Tensor]

N_CONTACTS = 4
BASE_CHANNELS = 10  # translation (3) + orientation (3) + contacts (4)
COV_FLOOR = 1e-6
LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    """
    Tabulated signal-retention schedule alpha_bar(t) on t in [0, 1].

    ``cosine`` uses cos^2((t + s) / (1 + s) * pi / 2) normalized to 1 at t=0 and
    lifted by ``alpha_bar_min`` so alpha_bar stays strictly positive;
    ``linear`` integrates a linear beta ramp between ``beta_min`` and ``beta_max``.
    """
    kind: str = "cosine"
    table_resolution: int = 1000
    cosine_offset: float = 0.008
    alpha_bar_min: float = 1e-6
    beta_min: float = 0.1
    beta_max: float = 20.0
    _table: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.table_resolution < 2:
            raise ConfigError("schedule table needs at least 2 points")
        grid = np.linspace(0.0, 1.0, self.table_resolution)
        if self.kind == "cosine":
            f = np.cos((grid + self.cosine_offset) / (1.0 + self.cosine_offset) * np.pi / 2.0) ** 2
            table = self.alpha_bar_min + (1.0 - self.alpha_bar_min) * f / f[0]
        elif self.kind == "linear":
            table = np.exp(-(self.beta_min * grid + 0.5 * (self.beta_max - self.beta_min) * grid ** 2))
        else:
            raise ConfigError(f"unknown schedule kind '{self.kind}'")
        table[0] = 1.0
        object.__setattr__(self, "_table", table)

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.table_resolution)

    def alpha_bar(self, t: float) -> float:
        t = float(t)
        if not 0.0 <= t <= 1.0:
            raise DomainError(f"diffusion time must lie in [0, 1], got {t}")
        if t == 0.0:
            return 1.0
        return float(np.interp(t, self.grid, self._table))

    def time_for(self, alpha_bar: float) -> float:
        """Inverse lookup: the time at which alpha_bar(t) equals the given value."""
        if not self._table[-1] <= alpha_bar <= 1.0:
            raise DomainError(f"alpha_bar {alpha_bar} outside the schedule's range")
        return float(np.interp(alpha_bar, self._table[::-1], self.grid[::-1]))

    def to_dict(self) -> Dict[str, object]:
        return {"kind": self.kind, "table_resolution": self.table_resolution,
                "cosine_offset": self.cosine_offset, "alpha_bar_min": self.alpha_bar_min,
                "beta_min": self.beta_min, "beta_max": self.beta_max}


DEFAULT_SCHEDULE = DiffusionSchedule()


def alpha_bar(schedule: DiffusionSchedule, t: float) -> float:
    return schedule.alpha_bar(t)


# ---------------------------------------------------------------------------
# Motion representation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MotionLayout:
    """Channel layout of a flattened motion window of ``n_frames`` frames."""
    n_frames: int
    n_joints: int = 4

    @property
    def frame_dim(self) -> int:
        return BASE_CHANNELS + 3 * self.n_joints

    @property
    def dim(self) -> int:
        return self.n_frames * self.frame_dim

    @property
    def translation(self) -> slice:
        return slice(0, 3)

    @property
    def orientation(self) -> slice:
        return slice(3, 6)

    @property
    def pose(self) -> slice:
        return slice(6, 6 + 3 * self.n_joints)

    @property
    def contact(self) -> slice:
        return slice(6 + 3 * self.n_joints, self.frame_dim)

    def channel_groups(self) -> np.ndarray:
        """Group name of every flattened dimension."""
        frame = np.empty(self.frame_dim, dtype=object)
        frame[self.translation] = "translation"
        frame[self.orientation] = "orientation"
        frame[self.pose] = "pose"
        frame[self.contact] = "contact"
        return np.tile(frame, self.n_frames)

    def flatten(self, frames: ArrayLike) -> ArrayLike:
        if tuple(frames.shape[-2:]) != (self.n_frames, self.frame_dim):
            raise ShapeError(f"expected (..., {self.n_frames}, {self.frame_dim}) frames, got {tuple(frames.shape)}")
        return frames.reshape(*frames.shape[:-2], self.dim)

    def unflatten(self, flat: ArrayLike) -> ArrayLike:
        if flat.shape[-1] != self.dim:
            raise ShapeError(f"expected flattened dimension {self.dim}, got {flat.shape[-1]}")
        return flat.reshape(*flat.shape[:-1], self.n_frames, self.frame_dim)


@dataclass
class MotionWindow:
    """Per-frame subject state [translation, orientation, local pose, contact logits]."""
    frames: np.ndarray
    n_joints: int = 4

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim != 2 or self.frames.shape[1] != BASE_CHANNELS + 3 * self.n_joints:
            raise ShapeError(f"motion frames must be (T, {BASE_CHANNELS + 3 * self.n_joints}), got {self.frames.shape}")

    @property
    def layout(self) -> MotionLayout:
        return MotionLayout(self.frames.shape[0], self.n_joints)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def translation(self) -> np.ndarray:
        return self.frames[:, 0:3]

    @property
    def orientation(self) -> np.ndarray:
        return self.frames[:, 3:6]

    @property
    def pose(self) -> np.ndarray:
        return self.frames[:, 6:6 + 3 * self.n_joints].reshape(self.n_frames, self.n_joints, 3)

    @property
    def contact_logits(self) -> np.ndarray:
        return self.frames[:, 6 + 3 * self.n_joints:]

    def contact_probs(self) -> np.ndarray:
        return expit(self.contact_logits)

    def flatten(self) -> np.ndarray:
        return self.frames.reshape(-1).copy()

    @classmethod
    def from_flat(cls, flat: ArrayLike, n_frames: int, n_joints: int = 4) -> "MotionWindow":
        flat = flat.detach().cpu().numpy() if isinstance(flat, torch.Tensor) else np.asarray(flat)
        return cls(MotionLayout(n_frames, n_joints).unflatten(flat).copy(), n_joints)

    @classmethod
    def from_parts(cls, translation, orientation, pose, contact_logits) -> "MotionWindow":
        pose = np.asarray(pose, dtype=float)
        n_frames, n_joints = pose.shape[:2]
        frames = np.concatenate([np.asarray(translation, dtype=float), np.asarray(orientation, dtype=float),
                                 pose.reshape(n_frames, 3 * n_joints), np.asarray(contact_logits, dtype=float)],
                                axis=1)
        return cls(frames, n_joints)


@dataclass
class MotionNormalizer:
    """
    Per-dimension affine normalization between world motion and prior space.

    With ``canonicalize`` the first frame's horizontal root position is removed
    before scaling, so windows anywhere on the ground plane share one prior.
    """
    mean: np.ndarray
    scale: np.ndarray
    n_frames: int
    n_joints: int = 4
    canonicalize: bool = False

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        dim = MotionLayout(self.n_frames, self.n_joints).dim
        if self.mean.shape != (dim,) or self.scale.shape != (dim,):
            raise ShapeError(f"normalizer vectors must have dimension {dim}")
        if np.any(self.scale <= 0):
            raise ConfigError("normalizer scales must be positive")
        self._torch_cache: Dict[str, torch.Tensor] = {}

    @classmethod
    def identity(cls, n_frames: int, n_joints: int = 4) -> "MotionNormalizer":
        dim = MotionLayout(n_frames, n_joints).dim
        return cls(np.zeros(dim), np.ones(dim), n_frames, n_joints, canonicalize=False)

    @classmethod
    def fit(cls, data: np.ndarray, n_frames: int, n_joints: int = 4, canonicalize: bool = True,
            min_scale: float = 1e-3) -> "MotionNormalizer":
        """Fit per-dimension mean and standard deviation to flattened windows."""
        base = cls.identity(n_frames, n_joints)
        base.canonicalize = canonicalize
        shifted = data - base.offset_vector(base.horizontal_offset(data)) if canonicalize else data
        std = shifted.std(axis=0)
        scale = np.where(std < min_scale, 1.0, std)
        return cls(shifted.mean(axis=0), scale, n_frames, n_joints, canonicalize)

    @property
    def layout(self) -> MotionLayout:
        return MotionLayout(self.n_frames, self.n_joints)

    def _vec(self, name: str, like: ArrayLike):
        value = getattr(self, name)
        if isinstance(like, torch.Tensor):
            if name not in self._torch_cache:
                self._torch_cache[name] = torch.as_tensor(value, dtype=torch.float64)
            return self._torch_cache[name]
        return value

    def _pattern(self, like: ArrayLike):
        layout = self.layout
        pattern = np.zeros((2, layout.dim))
        pattern[0, 0::layout.frame_dim] = 1.0
        pattern[1, 1::layout.frame_dim] = 1.0
        if isinstance(like, torch.Tensor):
            return torch.as_tensor(pattern, dtype=like.dtype)
        return pattern

    def horizontal_offset(self, flat: ArrayLike) -> ArrayLike:
        """First-frame root (x, y) of flattened windows (..., D) -> (..., 2)."""
        return flat[..., 0:2]

    def offset_vector(self, offset: ArrayLike) -> ArrayLike:
        return offset @ self._pattern(offset)

    def encode(self, flat: ArrayLike) -> ArrayLike:
        if self.canonicalize:
            flat = flat - self.offset_vector(self.horizontal_offset(flat))
        return (flat - self._vec("mean", flat)) / self._vec("scale", flat)

    def decode(self, normalized: ArrayLike, offset: Optional[ArrayLike] = None) -> ArrayLike:
        flat = normalized * self._vec("scale", normalized) + self._vec("mean", normalized)
        if self.canonicalize and offset is not None:
            flat = flat + self.offset_vector(offset)
        return flat

    def scale_sigma(self, sigma_world: np.ndarray) -> np.ndarray:
        """World-unit standard deviations to prior-space units."""
        return np.asarray(sigma_world, dtype=float) / self.scale


# ---------------------------------------------------------------------------
# Prior
# ---------------------------------------------------------------------------

@dataclass
class GmmPrior:
    """
    Gaussian mixture over flattened, normalized vectors.

    A prior with ``n_frames`` set is a motion prior: its dimension follows the
    motion layout and it carries a normalizer. Without ``n_frames`` it is a
    plain mixture over R^D.
    """
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    covariance_type: str = "diag"
    cov_floor: float = COV_FLOOR
    schedule: DiffusionSchedule = DEFAULT_SCHEDULE
    n_frames: Optional[int] = None
    n_joints: int = 4
    normalizer: Optional[MotionNormalizer] = None
    fit_trace: Tuple[float, ...] = ()

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covariances = np.asarray(self.covariances, dtype=float)
        k, dim = self.means.shape
        if self.covariance_type not in ("diag", "full"):
            raise ConfigError(f"unknown covariance type '{self.covariance_type}'")
        expected = (k, dim) if self.covariance_type == "diag" else (k, dim, dim)
        if self.covariances.shape != expected:
            raise ShapeError(f"covariances must have shape {expected}, got {self.covariances.shape}")
        if self.weights.shape != (k,):
            raise ShapeError("one weight per component required")
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights < 0):
            raise ConfigError("mixture weights must lie on the simplex")
        if self.n_frames is not None:
            if dim != self.layout.dim:
                raise ShapeError(f"prior dimension {dim} does not match "
                                 f"{self.n_frames} frames x {self.layout.frame_dim} channels")
            if self.normalizer is None:
                self.normalizer = MotionNormalizer.identity(self.n_frames, self.n_joints)

    @classmethod
    def standard_normal(cls, dim: int, schedule: DiffusionSchedule = DEFAULT_SCHEDULE) -> "GmmPrior":
        """Single-component N(0, I) over R^dim."""
        return cls(np.ones(1), np.zeros((1, dim)), np.ones((1, dim)), schedule=schedule)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def is_motion_prior(self) -> bool:
        return self.n_frames is not None

    @property
    def layout(self) -> MotionLayout:
        if self.n_frames is None:
            raise ConfigError("prior has no motion layout")
        return MotionLayout(self.n_frames, self.n_joints)

    def variances(self) -> np.ndarray:
        """Per-dimension marginal variances (K, D)."""
        if self.covariance_type == "diag":
            return self.covariances
        return np.diagonal(self.covariances, axis1=1, axis2=2)

    def check_floor(self) -> None:
        if self.covariance_type == "diag":
            ok = self.covariances.min() >= self.cov_floor * (1 - 1e-9)
        else:
            ok = all(np.linalg.eigvalsh(c).min() >= self.cov_floor * (1 - 1e-6) for c in self.covariances)
        if not ok:
            raise NumericalError("covariance below the configured floor")

    def component_log_prob(self, x: np.ndarray) -> np.ndarray:
        """log N(x; mu_k, Sigma_k) for x (N, D) -> (N, K)."""
        x = np.atleast_2d(x)
        out = np.empty((x.shape[0], self.n_components))
        for k in range(self.n_components):
            diff = x - self.means[k]
            if self.covariance_type == "diag":
                var = self.covariances[k]
                out[:, k] = -0.5 * ((diff ** 2 / var).sum(1) + np.log(var).sum() + self.dim * LOG_2PI)
            else:
                factor = cho_factor(self.covariances[k], lower=True)
                maha = np.einsum('nd,nd->n', diff, cho_solve(factor, diff.T).T)
                logdet = 2.0 * np.log(np.diag(factor[0])).sum()
                out[:, k] = -0.5 * (maha + logdet + self.dim * LOG_2PI)
        return out

    def log_likelihood(self, x: np.ndarray) -> float:
        """Mean per-sample log density."""
        return float(logsumexp(self.component_log_prob(x) + np.log(self.weights), axis=1).mean())

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def denoiser(self) -> "GmmDenoiser":
        return GmmDenoiser(self)

    def to_arrays(self) -> Tuple[Dict[str, np.ndarray], Dict[str, object]]:
        arrays = {"weights": self.weights, "means": self.means, "covariances": self.covariances,
                  "fit_trace": np.asarray(self.fit_trace, dtype=float)}
        meta = {"kind": "gmm_prior", "n_frames": self.n_frames, "n_joints": self.n_joints,
                "covariance_type": self.covariance_type, "cov_floor": self.cov_floor,
                "schedule": self.schedule.to_dict(), "canonicalize": False}
        if self.normalizer is not None:
            arrays["norm_mean"] = self.normalizer.mean
            arrays["norm_scale"] = self.normalizer.scale
            meta["canonicalize"] = self.normalizer.canonicalize
        return arrays, meta

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], meta: Dict[str, object]) -> "GmmPrior":
        n_frames = None if meta.get("n_frames") is None else int(meta["n_frames"])
        n_joints = int(meta.get("n_joints", 4))
        normalizer = None
        if n_frames is not None and "norm_mean" in arrays:
            normalizer = MotionNormalizer(arrays["norm_mean"], arrays["norm_scale"], n_frames, n_joints,
                                          bool(meta["canonicalize"]))
        return cls(arrays["weights"], arrays["means"], arrays["covariances"],
                   covariance_type=str(meta["covariance_type"]), cov_floor=float(meta["cov_floor"]),
                   schedule=DiffusionSchedule(**meta["schedule"]), n_frames=n_frames, n_joints=n_joints,
                   normalizer=normalizer,
                   fit_trace=tuple(float(v) for v in np.asarray(arrays.get("fit_trace", []))))


def sample_gmm(prior: GmmPrior, n: int, rng: np.random.Generator) -> np.ndarray:
    """Exact draws (n, D) from the mixture."""
    comps = rng.choice(prior.n_components, size=n, p=prior.weights)
    z = rng.standard_normal((n, prior.dim))
    if prior.covariance_type == "diag":
        return prior.means[comps] + np.sqrt(prior.covariances[comps]) * z
    chol = np.linalg.cholesky(prior.covariances)
    return prior.means[comps] + np.einsum('nij,nj->ni', chol[comps], z)


# ---------------------------------------------------------------------------
# Control signal and conditioning
# ---------------------------------------------------------------------------

@dataclass
class ControlSignal:
    """Observed values c on the channels selected by the binary mask M."""
    values: np.ndarray
    mask: np.ndarray
    obs_noise_sigma: np.ndarray

    def __post_init__(self):
        self.values = _to_numpy(self.values)
        self.mask = _to_numpy(self.mask)
        self.obs_noise_sigma = np.broadcast_to(_to_numpy(self.obs_noise_sigma), self.values.shape).copy()
        if self.mask.shape != self.values.shape:
            raise ShapeError("control mask and values differ in shape")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ConfigError("control mask entries must be 0 or 1")
        if np.any(self.obs_noise_sigma[self.mask == 1] <= 0):
            raise ConfigError("observation noise must be positive on observed channels")
        if not np.all(np.isfinite(self.values)):
            raise NumericalError("control values are not finite")

    @property
    def observed(self) -> np.ndarray:
        return self.mask == 1


def default_noise_sigma(prior: GmmPrior, noise: Optional[Dict[str, float]] = None) -> np.ndarray:
    """Per-dimension observation noise in prior space from per-group world sigmas."""
    noise = {**DEFAULT_OBS_NOISE, **(noise or {})}
    groups = prior.layout.channel_groups()
    sigma_world = np.array([noise[g] for g in groups], dtype=float)
    return prior.normalizer.scale_sigma(sigma_world)


def condition_prior(prior: GmmPrior, ctrl: Optional[ControlSignal]) -> GmmPrior:
    """
    Bayesian update of every component on c_i = H_0,i + eta_i for observed i.

    Component weights are reweighted by the marginal likelihood of the
    observations under that component. An empty mask returns ``prior`` itself.
    """
    if ctrl is None or not ctrl.observed.any():
        return prior
    if ctrl.values.shape != (prior.dim,):
        raise ShapeError(f"control dimension {ctrl.values.shape} does not match prior dimension {prior.dim}")
    obs = ctrl.observed
    y = ctrl.values[obs]
    noise_var = ctrl.obs_noise_sigma[obs] ** 2
    means = prior.means.copy()
    covs = prior.covariances.copy()
    log_lik = np.empty(prior.n_components)

    if prior.covariance_type == "diag":
        var_o = covs[:, obs]
        mu_o = means[:, obs]
        total = var_o + noise_var
        log_lik[:] = -0.5 * (((y - mu_o) ** 2 / total).sum(1) + np.log(total).sum(1) + obs.sum() * LOG_2PI)
        means[:, obs] = mu_o + var_o / total * (y - mu_o)
        covs[:, obs] = var_o * noise_var / total
    else:
        idx = np.flatnonzero(obs)
        for k in range(prior.n_components):
            sigma = covs[k]
            s_oo = sigma[np.ix_(idx, idx)] + np.diag(noise_var)
            factor = cho_factor(s_oo, lower=True)
            resid = y - means[k, idx]
            gain = cho_solve(factor, sigma[idx, :]).T
            log_lik[k] = -0.5 * (resid @ cho_solve(factor, resid) + 2.0 * np.log(np.diag(factor[0])).sum()
                                 + len(idx) * LOG_2PI)
            means[k] = means[k] + gain @ resid
            updated = sigma - gain @ sigma[idx, :]
            covs[k] = 0.5 * (updated + updated.T)

    log_w = np.log(prior.weights) + log_lik
    weights = np.exp(log_w - logsumexp(log_w))
    weights = weights / weights.sum()
    if not np.all(np.isfinite(weights)):
        raise NumericalError("conditioned mixture weights are not finite")
    return replace(prior, weights=weights, means=means, covariances=covs, cov_floor=0.0)


# ---------------------------------------------------------------------------
# Denoising
# ---------------------------------------------------------------------------

@dataclass
class DenoiserOutput:
    """Clean-signal estimate and the noise prediction consistent with it."""
    h0_hat: torch.Tensor
    eps_hat: torch.Tensor


class Denoiser(Protocol):
    schedule: DiffusionSchedule

    def denoise(self, x: torch.Tensor, t: float) -> DenoiserOutput:
        ...

    def condition(self, ctrl: Optional[ControlSignal]) -> "Denoiser":
        ...


class GmmDenoiser:
    """Closed-form posterior-mean denoiser of a GmmPrior (torch, differentiable in x)."""

    def __init__(self, prior: GmmPrior):
        self.prior = prior
        self.schedule = prior.schedule
        self._log_w = torch.as_tensor(np.log(np.maximum(prior.weights, 1e-300)), dtype=torch.float64)
        self._means = torch.as_tensor(prior.means, dtype=torch.float64)
        self._covs = torch.as_tensor(prior.covariances, dtype=torch.float64)

    def condition(self, ctrl: Optional[ControlSignal]) -> "GmmDenoiser":
        if ctrl is None or not ctrl.observed.any():
            return self
        return GmmDenoiser(condition_prior(self.prior, ctrl))

    def denoise(self, x: ArrayLike, t: float) -> DenoiserOutput:
        x = as_tensor(x)
        if x.shape[-1] != self.prior.dim:
            raise ShapeError(f"latent dimension {x.shape[-1]} does not match prior dimension {self.prior.dim}")
        ab = self.schedule.alpha_bar(t)
        if ab >= 1.0:
            return DenoiserOutput(x.clone(), torch.zeros_like(x))
        a = float(np.sqrt(ab))
        b = float(np.sqrt(1.0 - ab))
        batch = x.reshape(-1, self.prior.dim)
        diff = batch[:, None, :] - a * self._means[None]
        if self.prior.covariance_type == "diag":
            total = a * a * self._covs + b * b
            log_norm = -0.5 * ((diff ** 2 / total).sum(-1) + torch.log(total).sum(-1) + self.prior.dim * LOG_2PI)
            post = self._means[None] + (a * self._covs / total)[None] * diff
        else:
            eye = torch.eye(self.prior.dim, dtype=torch.float64)
            total = a * a * self._covs + b * b * eye
            chol = torch.linalg.cholesky(total)
            white = torch.linalg.solve_triangular(chol[None], diff[..., None], upper=False)
            logdet = 2.0 * torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum(-1)
            log_norm = -0.5 * ((white ** 2).sum((-1, -2)) + logdet + self.prior.dim * LOG_2PI)
            solved = torch.cholesky_solve(diff[..., None], chol[None])
            post = self._means[None] + a * (self._covs[None] @ solved)[..., 0]
        resp = torch.softmax(self._log_w + log_norm, dim=-1)
        h0 = (resp[..., None] * post).sum(1).reshape(x.shape)
        eps = (x - a * h0) / b
        return DenoiserOutput(h0, eps)


def denoise_exact(prior: GmmPrior, H_t: ArrayLike, t: float) -> DenoiserOutput:
    return GmmDenoiser(prior).denoise(H_t, t)


def denoise_controlled(prior: GmmPrior, H_t: ArrayLike, t: float, ctrl: Optional[ControlSignal]) -> DenoiserOutput:
    return denoise_exact(condition_prior(prior, ctrl), H_t, t)


def forward_sample(H: ArrayLike, t: float, eps: ArrayLike,
                   schedule: DiffusionSchedule = DEFAULT_SCHEDULE) -> torch.Tensor:
    """sqrt(alpha_bar) H + sqrt(1 - alpha_bar) eps."""
    H = as_tensor(H)
    eps = as_tensor(eps)
    if H.shape != eps.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} does not match motion shape {tuple(H.shape)}")
    ab = schedule.alpha_bar(t)
    return float(np.sqrt(ab)) * H + float(np.sqrt(1.0 - ab)) * eps


def ddim_step(H_t: ArrayLike, out: DenoiserOutput, t: float, t_next: float,
              schedule: DiffusionSchedule = DEFAULT_SCHEDULE) -> torch.Tensor:
    """Deterministic DDIM update from t to t_next < t."""
    if not t_next < t:
        raise OrderingError(f"DDIM step needs t_next < t, got t={t}, t_next={t_next}")
    if tuple(out.h0_hat.shape) != tuple(H_t.shape):
        raise ShapeError("denoiser output does not match the latent shape")
    ab_next = schedule.alpha_bar(t_next)
    return float(np.sqrt(ab_next)) * out.h0_hat + float(np.sqrt(1.0 - ab_next)) * out.eps_hat


def ddim_times(t_start: float, n_steps: int) -> List[float]:
    """Uniform grid t_start, t_start (n-1)/n, ..., 0."""
    if n_steps < 1:
        raise ConfigError("at least one DDIM step is required")
    return [t_start * (n_steps - k) / n_steps for k in range(n_steps + 1)]


def ddim_sample(denoiser: Denoiser, x_start: ArrayLike, t_start: float = 1.0, n_steps: int = 10) -> torch.Tensor:
    """Run the deterministic chain from ``t_start`` down to 0."""
    x = as_tensor(x_start)
    times = ddim_times(t_start, n_steps)
    for t, t_next in zip(times[:-1], times[1:]):
        x = ddim_step(x, denoiser.denoise(x, t), t, t_next, denoiser.schedule)
    return x


def ddim_invert(denoiser: Denoiser, x0: ArrayLike, n_steps: int = 10, fixed_point_iters: int = 3) -> torch.Tensor:
    """
    Map a clean sample to a latent at t=1 by running the DDIM chain upwards.

    The noise direction of each step is taken from the denoiser at the upper
    time; since that needs the unknown upper latent, a few fixed-point
    iterations starting from the signal-rescaled current latent are used.
    """
    x = as_tensor(x0)
    schedule = denoiser.schedule
    times = ddim_times(1.0, n_steps)[::-1]
    for t, t_next in zip(times[:-1], times[1:]):
        ab, ab_next = schedule.alpha_bar(t), schedule.alpha_bar(t_next)
        guess = float(np.sqrt(ab_next / ab)) * x
        for _ in range(fixed_point_iters):
            eps = denoiser.denoise(guess, t_next).eps_hat
            h0 = (x - float(np.sqrt(1.0 - ab)) * eps) / float(np.sqrt(ab))
            guess = float(np.sqrt(ab_next)) * h0 + float(np.sqrt(1.0 - ab_next)) * eps
        x = guess
    return x


def decode_latent(denoiser: Denoiser, z: torch.Tensor, n_steps: int = 10) -> torch.Tensor:
    """Deterministic DDIM decoding of a t=1 latent, differentiable in z."""
    return ddim_sample(denoiser, z, 1.0, n_steps)


def fit_latent(denoiser: Denoiser, target: ArrayLike, n_steps: int = 10, max_iter: int = 200,
               init: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, float]:
    """
    Latent whose decoding matches ``target`` in least squares (L-BFGS).

    ``init`` defaults to zeros; ``ddim_invert(target)`` is the usual start.

    Returns:
        The latent and the final squared residual
    """
    target = as_tensor(target).detach()
    z = (torch.zeros_like(target) if init is None else init.detach().clone()).requires_grad_(True)
    optimizer = torch.optim.LBFGS([z], max_iter=max_iter, tolerance_grad=1e-12, tolerance_change=1e-14,
                                  line_search_fn="strong_wolfe")

    def closure():
        optimizer.zero_grad()
        residual = ((decode_latent(denoiser, z, n_steps) - target) ** 2).sum()
        residual.backward()
        return residual

    optimizer.step(closure)
    with torch.no_grad():
        final = float(((decode_latent(denoiser, z, n_steps) - target) ** 2).sum())
    return z.detach(), final


def ddpm_sample(denoiser: Denoiser, x_start: ArrayLike, n_steps: int,
                generator: torch.Generator) -> torch.Tensor:
    """Ancestral sampling with the Gaussian posterior q(x_s | x_t, x0_hat)."""
    x = as_tensor(x_start)
    schedule = denoiser.schedule
    times = ddim_times(1.0, n_steps)
    for t, s in zip(times[:-1], times[1:]):
        out = denoiser.denoise(x, t)
        if s == 0.0:
            x = out.h0_hat
            break
        ab_t, ab_s = schedule.alpha_bar(t), schedule.alpha_bar(s)
        alpha_ts = ab_t / ab_s
        coef_x0 = np.sqrt(ab_s) * (1.0 - alpha_ts) / (1.0 - ab_t)
        coef_xt = np.sqrt(alpha_ts) * (1.0 - ab_s) / (1.0 - ab_t)
        var = (1.0 - ab_s) * (1.0 - alpha_ts) / (1.0 - ab_t)
        noise = torch.randn(x.shape, generator=generator, dtype=torch.float64)
        x = float(coef_x0) * out.h0_hat + float(coef_xt) * x + float(np.sqrt(var)) * noise
    return x


# ---------------------------------------------------------------------------
# EM fitting
# ---------------------------------------------------------------------------

def _kmeans_pp(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [data[rng.integers(len(data))]]
    for _ in range(1, k):
        d2 = np.min([((data - c) ** 2).sum(1) for c in centers], axis=0)
        total = d2.sum()
        probs = d2 / total if total > 0 else np.full(len(data), 1.0 / len(data))
        centers.append(data[rng.choice(len(data), p=probs)])
    return np.stack(centers)


def _floor_covariances(covs: np.ndarray, covariance_type: str, floor: float) -> Tuple[np.ndarray, bool]:
    if covariance_type == "diag":
        floored = covs < floor
        return np.maximum(covs, floor), bool(floored.any())
    out = covs.copy()
    hit = False
    for k in range(len(covs)):
        vals, vecs = np.linalg.eigh(covs[k])
        if vals.min() < floor:
            hit = True
            out[k] = (vecs * np.maximum(vals, floor)) @ vecs.T
    return out, hit


def fit_gmm(dataset: Union[np.ndarray, Sequence[MotionWindow]], K: int, seed: int,
            n_frames: Optional[int] = None, n_joints: int = 4, covariance_type: str = "diag",
            cov_floor: float = COV_FLOOR, max_iter: int = 200, tol: float = 1e-10,
            normalizer: Optional[MotionNormalizer] = None,
            schedule: DiffusionSchedule = DEFAULT_SCHEDULE) -> GmmPrior:
    """
    Fit a Gaussian mixture with EM.

    Args:
        dataset: (N, D) flattened windows in world units, or MotionWindow objects
        K: Number of components
        seed: Seed of the k-means++ initialization
        normalizer: Optional world-to-prior normalization applied before fitting

    Returns:
        GmmPrior whose ``fit_trace`` holds the per-iteration mean log-likelihood
    """
    if K < 1:
        raise ConfigError("K must be at least 1")
    if isinstance(dataset, np.ndarray):
        data = np.atleast_2d(np.asarray(dataset, dtype=float))
    else:
        windows = list(dataset)
        if not windows:
            raise ConfigError("cannot fit a prior to an empty dataset")
        n_frames = n_frames or windows[0].n_frames
        n_joints = windows[0].n_joints
        data = np.stack([w.flatten() for w in windows])
    if data.size == 0:
        raise ConfigError("cannot fit a prior to an empty dataset")
    n, dim = data.shape
    if n < 10 * K:
        raise ConfigError(f"dataset of {n} windows is too small for {K} components (need >= {10 * K})")
    if normalizer is not None:
        data = normalizer.encode(data)

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(data, K, rng)
    labels = np.argmin(((data[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    resp = np.zeros((n, K))
    resp[np.arange(n), labels] = 1.0

    floored_any = False
    trace: List[float] = []
    weights = means = covs = None
    for iteration in range(max_iter):
        # M-step
        nk = resp.sum(0)
        nk_safe = np.maximum(nk, 1e-12)
        weights = nk / n
        means = resp.T @ data / nk_safe[:, None]
        if covariance_type == "diag":
            covs = np.stack([resp[:, k] @ (data - means[k]) ** 2 / nk_safe[k] for k in range(K)])
        else:
            covs = np.stack([((data - means[k]) * resp[:, k:k + 1]).T @ (data - means[k]) / nk_safe[k]
                             for k in range(K)])
        covs, hit = _floor_covariances(covs, covariance_type, cov_floor)
        floored_any |= hit
        weights = weights / weights.sum()

        # E-step
        model = GmmPrior(weights, means, covs, covariance_type, cov_floor, schedule)
        log_prob = model.component_log_prob(data) + np.log(np.maximum(weights, 1e-300))
        norm = logsumexp(log_prob, axis=1)
        ll = float(norm.mean())
        if not np.isfinite(ll):
            raise NumericalError("EM log-likelihood is not finite", step=iteration)
        resp = np.exp(log_prob - norm[:, None])
        if trace and abs(ll - trace[-1]) <= tol * max(1.0, abs(ll)):
            trace.append(ll)
            break
        trace.append(ll)

    if floored_any:
        logger.warning(f"Singular covariance floored at {cov_floor:g} while fitting {K} components")
    logger.info(f"Fitted {K}-component {covariance_type} GMM on {n} windows: "
                f"log-likelihood {trace[-1]:.4f} after {len(trace)} iterations")
    return GmmPrior(weights, means, covs, covariance_type, cov_floor, schedule, n_frames=n_frames,
                    n_joints=n_joints, normalizer=normalizer, fit_trace=tuple(trace))


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy().astype(float)
    return np.asarray(x, dtype=float)
