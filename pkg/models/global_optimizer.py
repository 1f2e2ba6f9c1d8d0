"""
Joint optimization of subject motion, camera trajectory, scale and shape.

A sequence is cut into overlapping windows. Every window gets its own
variables, is initialized by a draw from the observation-conditioned prior and
optimized in three stages with Adam; the windows are then cross-faded into one
trajectory.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from config.schemas import LossWeights, RunConfig, Ablation
from config.settings import Method, settings
from models.coin_sds import DynamicControl, SdsConfig, SoftMask, coin_denoise, coin_sds_loss_grad, vanilla_sds_loss_grad
from models.diffusion_prior import (
    ControlSignal, GmmDenoiser, GmmPrior, condition_prior, ddim_invert, ddim_sample, ddpm_sample, fit_latent,
    default_noise_sigma, sample_gmm,
)
from utils.errors import ConfigError, NumericalError
from utils.geometry import (
    CameraFrames, Intrinsics, blend_rotations, blend_rotvecs, matrix_to_rotvec, rotvec_to_matrix, so3_exp,
    unwrap_rotvecs,
)
from utils.objectives import (
    LossBreakdown, body_joints, contact_labels, contact_term, hsr_indicators, hsr_term, local_pose_term,
    reprojection_term, shape_term, smoothness_term,
)
from utils.synthetic_world import BodyModel, ObservationSet

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LATENT_FIT_ITERS = 50
# smoothness needs three frames
MIN_WINDOW_FRAMES = 3
GROUND_PERCENTILE = 5.0


class Strategy(Enum):
    """How the prior supplies the regression target or parameterizes the motion."""
    COIN = "coin"
    VANILLA_SDS = "vanilla_sds"
    NOISE_OPT = "noise_opt"


@dataclass(frozen=True)
class StageConfig:
    stage: int
    steps: int = 500
    lr: float = 0.01

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")

    @property
    def unlocked(self) -> frozenset:
        names = {"r0", "h0", "log_s", "beta"}
        if self.stage >= 2:
            names.add("motion")
        if self.stage >= 3:
            names |= {"d_rot", "d_trans"}
        return frozenset(names)


def default_stages(steps: Sequence[int] = (500, 500, 500), lrs: Sequence[float] = (0.01, 0.01, 0.001)) -> List[StageConfig]:
    return [StageConfig(i + 1, int(n), float(lr)) for i, (n, lr) in enumerate(zip(steps, lrs))]


@dataclass(frozen=True)
class WindowPlan:
    window: int = 128
    overlap: int = 16
    threshold: float = 0.3

    def __post_init__(self):
        if not 0 <= self.overlap < self.window:
            raise ConfigError("overlap must satisfy 0 <= overlap < window")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("mask threshold must lie in (0, 1)")

    def spans(self, n_frames: int) -> List[Tuple[int, int]]:
        """
        Window boundaries covering ``n_frames``.

        Each window starts ``overlap`` frames before the previous one stops,
        so consecutive windows share exactly ``overlap`` frames. The last
        window may be short (it is padded to the prior length); it keeps at
        least MIN_WINDOW_FRAMES frames, which only widens its overlap when
        ``overlap`` is smaller than that.
        """
        min_frames = min(MIN_WINDOW_FRAMES, self.window)
        spans = []
        start = 0
        while True:
            stop = min(start + self.window, n_frames)
            spans.append((start, stop))
            if stop == n_frames:
                return spans
            start = stop - self.overlap
            if n_frames - start < min_frames:
                start = n_frames - min_frames


# ---------------------------------------------------------------------------
# Stitching
# ---------------------------------------------------------------------------

def _crossfade_weights(prev_stop: int, start: int) -> np.ndarray:
    n = prev_stop - start
    return (np.arange(n) + 1.0) / (n + 1.0)


def stitch(chunks: Sequence[np.ndarray], spans: Sequence[Tuple[int, int]], n_frames: int,
           kind: str = "linear") -> np.ndarray:
    """
    Merge per-window arrays into one sequence.

    Overlapping frames are cross-faded linearly from the earlier to the later
    window; ``rotvec`` and ``rotmat`` chunks are slerped instead. Identical
    overlaps are reproduced exactly.
    """
    first = np.asarray(chunks[0])
    merged = np.empty((n_frames,) + first.shape[1:])
    prev_stop = 0
    for chunk, (start, stop) in zip(chunks, spans):
        chunk = np.asarray(chunk)
        overlap = max(0, prev_stop - start)
        if overlap:
            w = _crossfade_weights(prev_stop, start)
            old, new = merged[start:prev_stop], chunk[:overlap]
            if kind == "rotvec":
                merged[start:prev_stop] = blend_rotvecs(old, new, w)
            elif kind == "rotmat":
                merged[start:prev_stop] = blend_rotations(old, new, w)
            else:
                shape = (-1,) + (1,) * (chunk.ndim - 1)
                merged[start:prev_stop] = old + w.reshape(shape) * (new - old)
        merged[start + overlap:stop] = chunk[overlap:stop - start]
        prev_stop = stop
    return merged


def split_and_stitch(sequence: np.ndarray, plan: WindowPlan,
                     solve: Optional[Callable[[np.ndarray, Tuple[int, int]], np.ndarray]] = None,
                     kind: str = "linear") -> np.ndarray:
    """Split a sequence into plan windows, map ``solve`` over them and merge the results."""
    sequence = np.asarray(sequence)
    spans = plan.spans(len(sequence))
    chunks = [sequence[a:b] if solve is None else solve(sequence[a:b], (a, b)) for a, b in spans]
    return stitch(chunks, spans, len(sequence), kind)


# ---------------------------------------------------------------------------
# Problem and variables
# ---------------------------------------------------------------------------

def build_mask(obs: ObservationSet, plan: WindowPlan) -> SoftMask:
    """
    Observation mask and confidences over motion channels.

    Trajectory channels use the per-frame mean keypoint confidence, each
    joint's pose channels use that joint's confidence; contact channels are
    never observed. A confidence equal to the threshold counts as observed.
    """
    conf = obs.confidence
    n_frames, n_joints = obs.n_frames, obs.n_joints
    frame_dim = 10 + 3 * n_joints
    trajectory = conf.mean(axis=1)
    score = np.zeros((n_frames, frame_dim))
    score[:, 0:6] = trajectory[:, None]
    score[:, 6:6 + 3 * n_joints] = np.repeat(conf[:, 1:1 + n_joints], 3, axis=1)
    mask = (score >= plan.threshold).astype(float)
    mask[:, 6 + 3 * n_joints:] = 0.0
    confidence = np.where(mask > 0, score, 0.0)
    return SoftMask(mask.reshape(-1), confidence.reshape(-1))


@dataclass
class WindowProblem:
    """Observations of one window, padded to the prior's window length."""
    start: int
    stop: int
    n_frames: int
    kp2d: torch.Tensor
    confidence: torch.Tensor
    local3d: torch.Tensor
    root_cam: torch.Tensor
    local3d_padded: torch.Tensor
    root_orient_cam: np.ndarray
    rel_rotations: torch.Tensor
    rel_translations: torch.Tensor
    first_rotation: torch.Tensor
    scene: torch.Tensor
    intrinsics: Intrinsics
    soft_mask: SoftMask
    h_base: float = 0.0
    body: BodyModel = field(default_factory=BodyModel)

    @property
    def n_valid(self) -> int:
        return self.stop - self.start


def _pad(array: np.ndarray, n_frames: int) -> np.ndarray:
    if len(array) >= n_frames:
        return array[:n_frames]
    pad = np.repeat(array[-1:], n_frames - len(array), axis=0)
    return np.concatenate([array, pad])


def prepare_window(obs: ObservationSet, span: Tuple[int, int], n_frames: int, plan: WindowPlan,
                   body: Optional[BodyModel] = None) -> WindowProblem:
    start, stop = span
    if stop - start > n_frames:
        raise ConfigError(f"window of {stop - start} frames exceeds the prior length {n_frames}")
    win = obs.slice(start, stop)
    sm = build_mask(win, plan)
    frame_dim = 10 + 3 * win.n_joints
    mask = np.zeros(n_frames * frame_dim)
    conf = np.zeros(n_frames * frame_dim)
    mask[:sm.mask.size] = sm.mask
    conf[:sm.confidence.size] = sm.confidence
    t64 = torch.float64
    return WindowProblem(
        start, stop, n_frames,
        kp2d=torch.as_tensor(win.kp2d, dtype=t64), confidence=torch.as_tensor(win.confidence, dtype=t64),
        local3d=torch.as_tensor(win.local3d, dtype=t64), root_cam=torch.as_tensor(_pad(win.root_cam, n_frames), dtype=t64),
        local3d_padded=torch.as_tensor(_pad(win.local3d, n_frames), dtype=t64),
        root_orient_cam=_pad(win.root_orient_cam, n_frames),
        rel_rotations=torch.as_tensor(_pad(win.cam_est.rotations, n_frames), dtype=t64),
        rel_translations=torch.as_tensor(_pad(win.cam_est.translations, n_frames), dtype=t64),
        first_rotation=torch.as_tensor(obs.first_rotation, dtype=t64),
        scene=torch.as_tensor(obs.scene_est.points, dtype=t64), intrinsics=obs.cam_est.intrinsics,
        soft_mask=SoftMask(mask, conf), body=body or BodyModel(),
    )


@dataclass
class OptVariables:
    """Free variables of one window; ``s`` is stored as log_s."""
    motion: torch.Tensor
    r0: torch.Tensor
    h0: torch.Tensor
    log_s: torch.Tensor
    beta: torch.Tensor
    d_rot: torch.Tensor
    d_trans: torch.Tensor
    latent: Optional[torch.Tensor] = None
    latent_offset: Optional[torch.Tensor] = None

    @classmethod
    def initial(cls, motion: np.ndarray) -> "OptVariables":
        n = motion.shape[0]
        z = lambda *shape: torch.zeros(shape, dtype=torch.float64)
        return cls(torch.as_tensor(motion, dtype=torch.float64).clone(), z(3), z(), z(), z(2), z(n, 3), z(n, 3))

    @property
    def scale(self) -> float:
        return float(torch.exp(self.log_s))

    def tensors(self) -> Dict[str, torch.Tensor]:
        out = {"motion": self.motion, "r0": self.r0, "h0": self.h0, "log_s": self.log_s, "beta": self.beta,
               "d_rot": self.d_rot, "d_trans": self.d_trans}
        if self.latent is not None:
            out["latent"] = self.latent
        return out

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: value.detach().cpu().numpy().copy() for name, value in self.tensors().items()}


def build_camera(problem: WindowProblem, variables: OptVariables) -> CameraFrames:
    """Camera of the window from the estimate and the current corrections."""
    first = so3_exp(variables.r0) @ problem.first_rotation
    relative = so3_exp(variables.d_rot) @ problem.rel_rotations
    rotations = relative @ first
    translations = problem.rel_translations + variables.d_trans
    zero = torch.zeros((), dtype=torch.float64)
    center0 = torch.stack([zero, zero, problem.h_base + variables.h0])
    return CameraFrames(rotations, translations, torch.exp(variables.log_s), center0, first, problem.intrinsics)


def _slice_camera(camera: CameraFrames, n: int) -> CameraFrames:
    return CameraFrames(camera.rotations[:n], camera.translations[:n], camera.scale, camera.center0,
                        camera.first_rotation, camera.intrinsics)


def _lift_orientation(camera: CameraFrames, root_orient_cam: np.ndarray) -> np.ndarray:
    rotations = camera.rotations.detach().cpu().numpy()
    world = np.swapaxes(rotations, 1, 2) @ rotvec_to_matrix(root_orient_cam)
    return unwrap_rotvecs(matrix_to_rotvec(world))


def lift_observations(problem: WindowProblem, camera: CameraFrames) -> torch.Tensor:
    """
    World-frame motion (T, F) from the camera-frame observations.

    Contact channels are left at zero.
    """
    n = problem.n_frames
    n_joints = problem.local3d.shape[1]
    translations = camera.metric_translations()
    rot_t = camera.rotations.transpose(1, 2)
    root = torch.einsum('tij,tj->ti', rot_t, problem.root_cam - translations)
    pose = torch.einsum('tij,tnj->tni', rot_t, problem.local3d_padded).reshape(n, 3 * n_joints)
    orient = torch.as_tensor(_lift_orientation(camera, problem.root_orient_cam), dtype=torch.float64)
    return torch.cat([root, orient, pose, torch.zeros((n, 4), dtype=torch.float64)], dim=1)


def ground_height(problem: WindowProblem, camera: CameraFrames) -> float:
    """Camera height above the ground from the lowest lifted foot positions."""
    lifted = lift_observations(problem, camera).detach()[:problem.n_valid]
    n_joints = problem.local3d.shape[1]
    feet = sorted(set(problem.body.foot_indices))
    pose = lifted[:, 6:6 + 3 * n_joints].reshape(-1, n_joints, 3)
    foot_z = (lifted[:, None, 2] + pose[:, feet, 2]).cpu().numpy().reshape(-1)
    return float(-np.percentile(foot_z, GROUND_PERCENTILE))


def initialize_window(problem: WindowProblem, prior: GmmPrior, seed: int, mode: str = "exact",
                      ddpm_steps: int = 100) -> Tuple[OptVariables, np.ndarray]:
    """
    Initial variables for one window.

    Returns:
        Variables with the motion drawn from the observation-conditioned prior,
        and the lifted observation estimate in prior space (the static control).
    """
    n = problem.n_frames
    variables = OptVariables.initial(np.zeros((n, prior.layout.frame_dim)))
    problem.h_base = ground_height(problem, build_camera(problem, variables))
    camera = build_camera(problem, variables)
    lifted = lift_observations(problem, camera).detach().reshape(-1)
    normalizer = prior.normalizer
    lifted_n = normalizer.encode(lifted)
    sigma = default_noise_sigma(prior)
    conditioned = condition_prior(prior, ControlSignal(lifted_n.numpy(), problem.soft_mask.mask, sigma))
    if mode == "exact":
        draw = sample_gmm(conditioned, 1, np.random.default_rng(seed))[0]
        draw = torch.as_tensor(draw, dtype=torch.float64)
    elif mode == "ddpm":
        generator = torch.Generator().manual_seed(seed)
        start = torch.randn(prior.dim, generator=generator, dtype=torch.float64)
        draw = ddpm_sample(GmmDenoiser(conditioned), start, ddpm_steps, generator)
    else:
        raise ConfigError(f"unknown initialization mode '{mode}'")
    motion = normalizer.decode(draw, normalizer.horizontal_offset(lifted)).reshape(n, -1)
    variables.motion = motion.detach().clone()
    return variables, lifted_n.numpy()


def initialize(obs: ObservationSet, prior: GmmPrior, seed: int, plan: Optional[WindowPlan] = None,
               mode: str = "exact", ddpm_steps: int = 100) -> OptVariables:
    """Initialize a sequence that fits in a single prior window."""
    plan = plan or WindowPlan(window=prior.n_frames, overlap=0)
    problem = prepare_window(obs, (0, obs.n_frames), prior.n_frames, plan)
    variables, _ = initialize_window(problem, prior, seed, mode, ddpm_steps)
    return variables


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

@dataclass
class Anchor:
    """Motion held fixed in the camera frame during the first stage."""
    root_cam: torch.Tensor
    offsets_cam: torch.Tensor
    root_orient_cam: np.ndarray
    contact: torch.Tensor

    @classmethod
    def from_motion(cls, motion: torch.Tensor, camera: CameraFrames, n_joints: int) -> "Anchor":
        n = motion.shape[0]
        root = torch.einsum('tij,tj->ti', camera.rotations, motion[:, 0:3]) + camera.metric_translations()
        theta = motion[:, 6:6 + 3 * n_joints].reshape(n, n_joints, 3)
        offsets = torch.einsum('tij,tnj->tni', camera.rotations, theta)
        world_rot = rotvec_to_matrix(motion[:, 3:6].detach().cpu().numpy())
        orient_cam = matrix_to_rotvec(camera.rotations.detach().cpu().numpy() @ world_rot)
        return cls(root.detach(), offsets.detach(), orient_cam, motion[:, 6 + 3 * n_joints:].detach())

    def world_motion(self, camera: CameraFrames) -> torch.Tensor:
        n, n_joints = self.offsets_cam.shape[:2]
        rot_t = camera.rotations.transpose(1, 2)
        root = torch.einsum('tij,tj->ti', rot_t, self.root_cam - camera.metric_translations())
        pose = torch.einsum('tij,tnj->tni', rot_t, self.offsets_cam).reshape(n, 3 * n_joints)
        orient = torch.as_tensor(_lift_orientation(camera, self.root_orient_cam), dtype=torch.float64)
        return torch.cat([root, orient, pose, self.contact], dim=1)


@dataclass
class StageContext:
    """Everything a stage needs besides the variables."""
    problem: WindowProblem
    prior: GmmPrior
    weights: LossWeights
    sds: SdsConfig
    strategy: Strategy
    control: DynamicControl
    rng: np.random.Generator
    generator: torch.Generator
    huber_delta: float = 10.0
    camera_coupling: bool = False
    noise_opt_steps: int = 10
    window_index: int = 0
    anchor: Optional[Anchor] = None

    def __post_init__(self):
        self.denoiser = GmmDenoiser(self.prior)
        self.sigma = default_noise_sigma(self.prior)


def current_motion(ctx: StageContext, variables: OptVariables, camera: CameraFrames, stage: int) -> torch.Tensor:
    if stage == 1 and ctx.anchor is not None:
        return ctx.anchor.world_motion(camera)
    if ctx.strategy == Strategy.NOISE_OPT and variables.latent is not None:
        normalizer = ctx.prior.normalizer
        decoded = ddim_sample(ctx.denoiser, variables.latent, 1.0, ctx.noise_opt_steps)
        return normalizer.decode(decoded, variables.latent_offset).reshape(ctx.problem.n_frames, -1)
    return variables.motion


def _pseudo_target(ctx: StageContext, H_n: torch.Tensor, t: float, eps: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Pseudo ground truth and the SDS gradient in prior space."""
    if ctx.strategy == Strategy.VANILLA_SDS:
        result = vanilla_sds_loss_grad(ctx.denoiser, H_n, t, eps, ctx.sds)
        return result.h0_hat, result.grad
    control = ctx.control.update(H_n) if ctx.sds.use_control else None
    target, _ = coin_denoise(ctx.denoiser, H_n, ctx.problem.soft_mask, ctx.sds, t, eps, control=control,
                             obs_noise_sigma=ctx.sigma)
    _, grad = coin_sds_loss_grad(H_n, target, t, ctx.sds, ctx.denoiser.schedule)
    return target, grad


def objective(ctx: StageContext, variables: OptVariables, stage: int, progress: float = 0.0
              ) -> Tuple[torch.Tensor, LossBreakdown, float]:
    """
    Weighted total of all terms for the current variables.

    Draws a fresh (t, eps), recomputes the pseudo ground truth, the contact
    labels and the occlusion indicators, and returns the differentiable total
    (the SDS part enters as the surrogate <g, H>) with its per-term breakdown.
    """
    problem = ctx.problem
    weights = ctx.weights.as_dict()
    n_valid = problem.n_valid
    camera = build_camera(problem, variables)
    motion = current_motion(ctx, variables, camera, stage)
    beta = variables.beta
    n_joints = problem.local3d.shape[1]
    contact_slice = slice(6 + 3 * n_joints, 10 + 3 * n_joints)

    normalizer = ctx.prior.normalizer
    H_n = normalizer.encode(motion.reshape(-1))
    t = ctx.sds.sample_t(ctx.rng, progress)
    eps = torch.randn(H_n.shape, generator=ctx.generator, dtype=torch.float64)
    sds_value = 0.0
    surrogate = torch.zeros((), dtype=torch.float64)
    if ctx.strategy == Strategy.NOISE_OPT:
        labels_source = motion.detach()
    else:
        target, grad = _pseudo_target(ctx, H_n.detach(), t, eps)
        diff = H_n.detach() - target
        sds_value = float(grad.dot(diff) / 2.0)
        if ctx.camera_coupling or stage > 1:
            sds_input = H_n
        else:
            sds_input = normalizer.encode(current_motion(ctx, variables, camera.detach(), stage).reshape(-1))
        surrogate = (grad * sds_input).sum()
        offset = normalizer.horizontal_offset(motion.detach().reshape(-1))
        labels_source = normalizer.decode(target, offset).reshape(problem.n_frames, -1)
    labels = contact_labels(labels_source[:n_valid, contact_slice])

    motion_v = motion[:n_valid]
    cam_v = CameraFrames(camera.rotations[:n_valid], camera.translations[:n_valid], camera.scale,
                         camera.center0, camera.first_rotation, camera.intrinsics)
    joints = body_joints(motion_v, beta, n_joints)
    indicator, nearest = hsr_indicators(joints.detach(), cam_v.detach(), problem.scene)

    terms = {
        "l_2d": reprojection_term(joints, cam_v, problem.kp2d, problem.confidence, ctx.huber_delta),
        "l_3d": local_pose_term(motion_v, beta, cam_v, problem.local3d),
        "l_beta": shape_term(beta),
        "l_smooth": smoothness_term(joints, motion_v[:, 3:6]),
        "l_contact": contact_term(joints, labels, problem.body.foot_indices),
        "l_hsr": hsr_term(joints, cam_v, problem.scene, indicator, nearest),
    }
    total = sum(weights[name] * value for name, value in terms.items()) + weights["l_coin_sds"] * surrogate
    breakdown = LossBreakdown(**{name: float(value.detach()) for name, value in terms.items()},
                              l_coin_sds=sds_value, weights=weights)
    return total, breakdown, t


def _finite_difference_latent_grad(ctx: StageContext, variables: OptVariables, stage: int,
                                   step: float = 1e-5) -> torch.Tensor:
    """Central differences of the non-SDS total w.r.t. the latent (fallback path)."""
    latent = variables.latent.detach().clone()
    grad = torch.zeros_like(latent)
    state = (ctx.rng.bit_generator.state, ctx.generator.get_state())
    for i in range(latent.numel()):
        values = []
        for sign in (1.0, -1.0):
            shifted = latent.clone()
            shifted[i] += sign * step
            variables.latent = shifted
            ctx.rng.bit_generator.state = state[0]
            ctx.generator.set_state(state[1])
            with torch.no_grad():
                values.append(float(objective(ctx, variables, stage)[0]))
        grad[i] = (values[0] - values[1]) / (2.0 * step)
    variables.latent = latent
    ctx.rng.bit_generator.state = state[0]
    ctx.generator.set_state(state[1])
    return grad


def run_stage(variables: OptVariables, stage: StageConfig, ctx: StageContext,
              trace: Optional[List[Dict[str, Any]]] = None) -> OptVariables:
    """
    Adam on the unlocked variables of one stage.

    Locked variables are never handed to the optimizer and so stay
    bit-identical. Raises NumericalError with the trace so far on a
    non-finite loss.
    """
    trace = trace if trace is not None else []
    tensors = variables.tensors()
    unlocked = set(stage.unlocked)
    if ctx.strategy == Strategy.NOISE_OPT and "motion" in unlocked:
        unlocked = (unlocked - {"motion"}) | {"latent"}
    params = []
    for name, tensor in tensors.items():
        tensor.requires_grad_(name in unlocked)
        if name in unlocked:
            params.append(tensor)
    optimizer = torch.optim.Adam(params, lr=stage.lr, betas=ADAM_BETAS, eps=ADAM_EPS)

    iterator = tqdm(range(stage.steps), desc=f"window {ctx.window_index} stage {stage.stage}",
                    disable=not settings.progress, leave=False)
    for step in iterator:
        optimizer.zero_grad()
        total, breakdown, t = objective(ctx, variables, stage.stage, step / max(stage.steps, 1))
        if not torch.isfinite(total):
            raise NumericalError(f"non-finite loss in stage {stage.stage}", step=step, trace=trace)
        total.backward()
        if variables.latent is not None and variables.latent.grad is not None \
                and not torch.isfinite(variables.latent.grad).all():
            logger.warning("Non-finite gradient through the sampling chain; using finite differences")
            variables.latent.grad = _finite_difference_latent_grad(ctx, variables, stage.stage)
        optimizer.step()
        row = {"window": ctx.window_index, "stage": stage.stage, "iteration": step, "t": t}
        row.update(breakdown.as_row())
        row["scale"] = variables.scale
        trace.append(row)

    for tensor in variables.tensors().values():
        tensor.requires_grad_(False)
    if trace:
        last = trace[-1]
        logger.info(f"Window {ctx.window_index} stage {stage.stage} done: total {last['total']:.5f}, "
                    f"scale {last['scale']:.4f}")
    return variables


# ---------------------------------------------------------------------------
# Whole sequences
# ---------------------------------------------------------------------------

@dataclass
class WindowResult:
    span: Tuple[int, int]
    motion: np.ndarray
    rotations: np.ndarray
    centers: np.ndarray
    scale: float
    beta: np.ndarray
    variables: Dict[str, np.ndarray]
    trace: List[Dict[str, Any]]


@dataclass
class Solution:
    """Merged estimate of a whole sequence."""
    method: str
    motion: np.ndarray
    rotations: np.ndarray
    centers: np.ndarray
    scale: float
    beta: np.ndarray
    windows: List[WindowResult]
    trace: List[Dict[str, Any]]

    @property
    def translations(self) -> np.ndarray:
        return -np.einsum('tij,tj->ti', self.rotations, self.centers)


def sds_config_from(run: RunConfig) -> SdsConfig:
    mode = run.sds.inpaint_mode
    if run.has(Ablation.NO_SOFT_INPAINT):
        mode = "off"
    return SdsConfig(n_ddim_steps=run.sds.n_ddim_steps, omega=run.sds.omega, t_range=(run.sds.t_min, run.sds.t_max),
                     rng_seed=run.seed, inpaint_mode=mode, use_control=not run.has(Ablation.NO_CONTROL),
                     anneal=run.sds.anneal)


def strategy_for(method: Method) -> Strategy:
    return {Method.VANILLA_SDS: Strategy.VANILLA_SDS, Method.NOISE_OPT: Strategy.NOISE_OPT}.get(method, Strategy.COIN)


def window_seeds(seed: int, index: int) -> Tuple[int, int, int]:
    """Independent (init, rng, torch) seeds of one window."""
    state = np.random.SeedSequence([seed, index]).generate_state(3)
    return int(state[0]), int(state[1]), int(state[2])


def _window_result(problem: WindowProblem, variables: OptVariables, trace: List[Dict[str, Any]]) -> WindowResult:
    camera = build_camera(problem, variables)
    motion = variables.motion
    n = problem.n_valid
    with torch.no_grad():
        return WindowResult((problem.start, problem.stop), motion.detach().numpy()[:n].copy(),
                            camera.rotations.detach().numpy()[:n].copy(), camera.centers().detach().numpy()[:n].copy(),
                            variables.scale, variables.beta.detach().numpy().copy(), variables.snapshot(), trace)


def optimize_window(obs: ObservationSet, span: Tuple[int, int], index: int, prior: GmmPrior, run: RunConfig,
                    stages: Optional[List[StageConfig]] = None) -> WindowResult:
    """Initialize and optimize one window with the strategy selected by ``run.method``."""
    plan = WindowPlan(run.optim.window_frames, run.optim.overlap, run.optim.mask_threshold)
    problem = prepare_window(obs, span, prior.n_frames, plan)
    init_seed, rng_seed, torch_seed = window_seeds(run.seed, index)
    variables, lifted_n = initialize_window(problem, prior, init_seed, run.init_mode, run.ddpm_steps)
    trace: List[Dict[str, Any]] = []
    if run.method == Method.INIT_ONLY:
        return _window_result(problem, variables, trace)

    stages = stages or default_stages(run.optim.stage_steps, run.optim.stage_lrs)
    ctx = StageContext(
        problem=problem, prior=prior, weights=run.effective_weights(), sds=sds_config_from(run),
        strategy=strategy_for(run.method),
        control=DynamicControl(lifted_n, problem.soft_mask.mask, default_noise_sigma(prior),
                               dynamic=not run.has(Ablation.NO_DYNAMIC_CONTROL)),
        rng=np.random.default_rng(rng_seed), generator=torch.Generator().manual_seed(torch_seed),
        huber_delta=run.optim.huber_delta, camera_coupling=run.sds.camera_coupling,
        noise_opt_steps=run.noise_opt_steps, window_index=index)
    for stage in stages:
        if stage.stage == 1:
            ctx.anchor = Anchor.from_motion(variables.motion, build_camera(problem, variables),
                                            problem.local3d.shape[1])
        run_stage(variables, stage, ctx, trace)
        if stage.stage == 1:
            with torch.no_grad():
                variables.motion = ctx.anchor.world_motion(build_camera(problem, variables)).detach().clone()
            ctx.anchor = None
            if ctx.strategy == Strategy.NOISE_OPT:
                flat = variables.motion.reshape(-1)
                variables.latent_offset = prior.normalizer.horizontal_offset(flat).clone()
                target = prior.normalizer.encode(flat).detach()
                start = ddim_invert(ctx.denoiser, target, run.noise_opt_steps)
                variables.latent, residual = fit_latent(ctx.denoiser, target, run.noise_opt_steps,
                                                        max_iter=LATENT_FIT_ITERS, init=start)
                logger.debug(f"Window {index}: latent fit residual {residual:.3e}")
    if ctx.strategy == Strategy.NOISE_OPT and variables.latent is not None:
        with torch.no_grad():
            variables.motion = current_motion(ctx, variables, build_camera(problem, variables), 3).detach().clone()
    return _window_result(problem, variables, trace)


def merge_windows(results: List[WindowResult], n_frames: int, method: str) -> Solution:
    spans = [r.span for r in results]
    linear = stitch([r.motion for r in results], spans, n_frames)
    orientation = stitch([r.motion[:, 3:6] for r in results], spans, n_frames, kind="rotvec")
    motion = linear.copy()
    motion[:, 3:6] = orientation
    rotations = stitch([r.rotations for r in results], spans, n_frames, kind="rotmat")
    centers = stitch([r.centers for r in results], spans, n_frames)
    lengths = np.array([b - a for a, b in spans], dtype=float)
    scale = float(np.dot(lengths, [r.scale for r in results]) / lengths.sum())
    beta = (lengths[:, None] * np.stack([r.beta for r in results])).sum(0) / lengths.sum()
    trace = [row for r in results for row in r.trace]
    logger.debug(f"Merged {len(results)} windows, scale {scale:.4f}")
    return Solution(method, motion, rotations, centers, scale, beta, results, trace)


def optimize_sequence(obs: ObservationSet, prior: GmmPrior, run: RunConfig,
                      stages: Optional[List[StageConfig]] = None) -> Solution:
    """
    Full pipeline over all windows of a sequence.

    With ``run.optim.parallel`` windows run on a thread pool; the result does
    not depend on the execution order.
    """
    if not prior.is_motion_prior:
        raise ConfigError("optimization needs a motion prior")
    plan = WindowPlan(run.optim.window_frames, run.optim.overlap, run.optim.mask_threshold)
    if plan.window != prior.n_frames:
        raise ConfigError(f"window length {plan.window} does not match the prior's {prior.n_frames} frames")
    spans = plan.spans(obs.n_frames)
    logger.info(f"Optimizing {obs.n_frames} frames in {len(spans)} window(s) with {run.variant_name()}")
    jobs = [(span, i) for i, span in enumerate(spans)]
    if run.optim.parallel and len(jobs) > 1:
        workers = max(1, min(settings.max_workers, len(jobs)))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda job: optimize_window(obs, job[0], job[1], prior, run, stages), jobs))
    else:
        results = [optimize_window(obs, span, i, prior, run, stages) for span, i in jobs]
    return merge_windows(results, obs.n_frames, run.variant_name())
