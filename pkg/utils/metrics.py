"""
Evaluation metrics for human and camera motion.

Joint arrays are (T, J, 3), camera centres and root positions (T, 3), root
orientations (T, 3) rotation vectors. All errors are in the length unit of
the inputs unless stated otherwise.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from config.settings import DEFAULT_FRAME_INTERVAL
from models.diffusion_prior import MotionWindow
from utils.errors import ConfigError, DegenerateAlignmentError, ShapeError
from utils.geometry import geodesic_degrees, rotvec_to_matrix

logger = logging.getLogger(__name__)

DEFAULT_CHUNK = 100
ALIGNMENT_KINDS = ("first_frame", "first_two_frames", "full_procrustes", "rigid_only", "similarity")
W_MPJPE_PROTOCOLS = {"first_two_frames": 2, "rich": 1}


@dataclass(frozen=True)
class Alignment:
    """x -> scale * R x + t."""
    kind: str
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ALIGNMENT_KINDS:
            raise ConfigError(f"unknown alignment kind '{self.kind}'")
        if self.scale <= 0:
            raise DegenerateAlignmentError("alignment scale must be positive")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


def procrustes(A: np.ndarray, B: np.ndarray, allow_scale: bool = True, kind: Optional[str] = None,
               require_spread: bool = True) -> Alignment:
    """
    Least-squares transform mapping points A onto B (Umeyama).

    The rotation is always proper; a reflection in the cross-covariance is
    absorbed by flipping the weakest singular direction.

    Args:
        A: Source points (N, 3)
        B: Target points (N, 3)
        allow_scale: Fit a similarity instead of a rigid transform
        kind: Label stored on the result
        require_spread: Reject collinear or coincident point sets

    Raises:
        DegenerateAlignmentError: Fewer than 3 points, or a degenerate set
    """
    A = np.asarray(A, dtype=float).reshape(-1, 3)
    B = np.asarray(B, dtype=float).reshape(-1, 3)
    if A.shape != B.shape:
        raise ShapeError(f"point sets differ in shape: {A.shape} vs {B.shape}")
    if len(A) < 3 and require_spread:
        raise DegenerateAlignmentError("alignment needs at least 3 points")
    mu_a, mu_b = A.mean(axis=0), B.mean(axis=0)
    Ac, Bc = A - mu_a, B - mu_b
    spread = np.linalg.svd(Ac, compute_uv=False)
    if require_spread and spread[1] <= 1e-9 * max(spread[0], 1.0):
        raise DegenerateAlignmentError("point set is collinear or coincident")
    n = len(A)
    U, S, Vt = np.linalg.svd(Bc.T @ Ac / n)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U) * np.linalg.det(Vt)) or 1.0
    R = U @ D @ Vt
    var_a = (Ac ** 2).sum() / n
    scale = float(np.trace(np.diag(S) @ D) / var_a) if allow_scale and var_a > 1e-300 else 1.0
    if scale <= 0:
        raise DegenerateAlignmentError("similarity alignment produced a non-positive scale")
    kind = kind or ("similarity" if allow_scale else "rigid_only")
    return Alignment(kind, R, mu_b - scale * R @ mu_a, scale)


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")


def _chunks(n_frames: int, chunk: int):
    """Chunk bounds; a trailing chunk of a single frame is merged into its predecessor."""
    if n_frames < 2:
        raise ConfigError("sequence shorter than 2 frames")
    bounds = [(s, min(s + chunk, n_frames)) for s in range(0, n_frames, chunk)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] < 2:
        last = bounds.pop()
        bounds[-1] = (bounds[-1][0], last[1])
    return bounds


def _mean_error(pred: np.ndarray, gt: np.ndarray) -> float:
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def w_mpjpe(pred: np.ndarray, gt: np.ndarray, chunk: int = DEFAULT_CHUNK, protocol: str = "first_two_frames",
            error_joints: Optional[Sequence[int]] = None) -> float:
    """
    World MPJPE over chunks aligned rigidly on their first frame(s).

    ``protocol`` selects the alignment frames: ``first_two_frames`` (default)
    or ``rich`` (first frame only). ``error_joints`` restricts the error to a
    subset of joints while the alignment still uses all of them.
    """
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    _check_pair(pred, gt)
    if protocol not in W_MPJPE_PROTOCOLS:
        raise ConfigError(f"unknown W-MPJPE protocol '{protocol}'")
    n_align = W_MPJPE_PROTOCOLS[protocol]
    kind = "first_two_frames" if n_align == 2 else "first_frame"
    joints = slice(None) if error_joints is None else list(error_joints)
    errors = []
    for start, stop in _chunks(len(pred), chunk):
        fit = procrustes(pred[start:start + n_align], gt[start:start + n_align], allow_scale=False, kind=kind)
        aligned = fit.apply(pred[start:stop])
        errors.append(_mean_error(aligned[:, joints], gt[start:stop, joints]))
    return float(np.mean(errors))


def w_rje(pred: np.ndarray, gt: np.ndarray, chunk: int = DEFAULT_CHUNK, protocol: str = "first_two_frames") -> float:
    """Root joint error under the W-MPJPE alignment."""
    return w_mpjpe(pred, gt, chunk, protocol, error_joints=[0])


def wa_mpjpe(pred: np.ndarray, gt: np.ndarray, chunk: int = DEFAULT_CHUNK) -> float:
    """World MPJPE over chunks aligned rigidly on all of their frames."""
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    _check_pair(pred, gt)
    errors = []
    for start, stop in _chunks(len(pred), chunk):
        fit = procrustes(pred[start:stop], gt[start:stop], allow_scale=False, kind="full_procrustes")
        errors.append(_mean_error(fit.apply(pred[start:stop]), gt[start:stop]))
    return float(np.mean(errors))


def pa_mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Per-frame similarity-aligned MPJPE."""
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    _check_pair(pred, gt)
    errors = [_mean_error(procrustes(p, g, allow_scale=True).apply(p), g) for p, g in zip(pred, gt)]
    return float(np.mean(errors))


def accel_error(pred: np.ndarray, gt: np.ndarray, dt: float = DEFAULT_FRAME_INTERVAL) -> float:
    """Mean norm of the second-difference error divided by dt^2."""
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    _check_pair(pred, gt)
    if len(pred) < 3:
        raise ConfigError("acceleration error needs at least 3 frames")
    if dt <= 0:
        raise ConfigError("frame interval must be positive")
    accel = lambda x: x[2:] - 2.0 * x[1:-1] + x[:-2]
    return float(np.linalg.norm(accel(pred) - accel(gt), axis=-1).mean() / dt ** 2)


def ate(pred_centers: np.ndarray, gt_centers: np.ndarray, with_scale: bool = True) -> float:
    """
    RMS camera-centre error after alignment.

    With ``with_scale`` a similarity is fitted (ATE), otherwise a rigid
    transform (ATE-S).
    """
    pred, gt = np.asarray(pred_centers, dtype=float), np.asarray(gt_centers, dtype=float)
    _check_pair(pred, gt)
    fit = procrustes(pred, gt, allow_scale=with_scale, require_spread=False)
    return float(np.sqrt(((fit.apply(pred) - gt) ** 2).sum(-1).mean()))


def rte_roe(pred_root: np.ndarray, pred_orient: np.ndarray, gt_root: np.ndarray,
            gt_orient: np.ndarray) -> Dict[str, float]:
    """
    Root translation and orientation error after aligning the first root pose.

    Returns:
        ``{"rte": mean position error, "roe": mean geodesic error in degrees}``
    """
    pred_root, gt_root = np.asarray(pred_root, dtype=float), np.asarray(gt_root, dtype=float)
    _check_pair(pred_root, gt_root)
    _check_pair(np.asarray(pred_orient), np.asarray(gt_orient))
    pred_rot, gt_rot = rotvec_to_matrix(pred_orient), rotvec_to_matrix(gt_orient)
    R = gt_rot[0] @ pred_rot[0].T
    t = gt_root[0] - R @ pred_root[0]
    rte = _mean_error(pred_root @ R.T + t, gt_root)
    roe = float(geodesic_degrees(R[None] @ pred_rot, gt_rot).mean())
    return {"rte": rte, "roe": roe}


def cam_accel(pred_centers: np.ndarray, gt_centers: np.ndarray, dt: float = DEFAULT_FRAME_INTERVAL) -> float:
    return accel_error(pred_centers, gt_centers, dt)


def scale_error(scale: float, scale_true: float) -> float:
    """Relative scale error |s - s_true| / s_true."""
    return abs(float(scale) - float(scale_true)) / float(scale_true)


def evaluate_motion(pred_joints: np.ndarray, gt_joints: np.ndarray, pred_orient: np.ndarray, gt_orient: np.ndarray,
                    pred_centers: np.ndarray, gt_centers: np.ndarray, dt: float = DEFAULT_FRAME_INTERVAL,
                    chunk: int = DEFAULT_CHUNK, protocol: str = "first_two_frames") -> Dict[str, float]:
    """All human and camera metrics for one sequence."""
    if len(pred_joints) != len(gt_joints) or len(pred_centers) != len(gt_centers):
        raise ShapeError(f"prediction covers {len(pred_joints)} frames, ground truth {len(gt_joints)}")
    report = {
        "pa_mpjpe": pa_mpjpe(pred_joints, gt_joints),
        "w_mpjpe": w_mpjpe(pred_joints, gt_joints, chunk, protocol),
        "wa_mpjpe": wa_mpjpe(pred_joints, gt_joints, chunk),
        "w_rje": w_rje(pred_joints, gt_joints, chunk, protocol),
        "accel": accel_error(pred_joints, gt_joints, dt),
        "ate": ate(pred_centers, gt_centers, with_scale=True),
        "ate_s": ate(pred_centers, gt_centers, with_scale=False),
        "cam_accel": cam_accel(pred_centers, gt_centers, dt),
    }
    report.update(rte_roe(pred_joints[:, 0], pred_orient, gt_joints[:, 0], gt_orient))
    return report


def evaluate_solution(solution, truth, chunk: int = DEFAULT_CHUNK, protocol: str = "first_two_frames") -> Dict[str, float]:
    """
    Metrics of a merged optimization result against the ground truth.

    Args:
        solution: ``Solution`` (or any object with motion, centers, scale, beta)
        truth: ``GroundTruth`` of the scenario
    """
    motion = MotionWindow(np.asarray(solution.motion), truth.body.n_joints)
    if motion.n_frames != truth.n_frames:
        raise ShapeError(f"solution covers {motion.n_frames} frames, ground truth {truth.n_frames}")
    pred_joints = truth.body.joints(motion, solution.beta)
    report = evaluate_motion(pred_joints, truth.joints(), motion.orientation, truth.motion.orientation,
                             np.asarray(solution.centers), truth.camera.centers(), 1.0 / truth.fps, chunk, protocol)
    report["scale_error"] = scale_error(solution.scale, truth.scale_true)
    logger.info(f"W-MPJPE {report['w_mpjpe']:.4f}, ATE-S {report['ate_s']:.4f}, scale error {report['scale_error']:.4f}")
    return report
