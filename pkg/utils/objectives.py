"""
Loss terms of the joint subject/camera objective.

Each term is a plain torch function of motion frames (T, 10 + 3J), shape
parameters beta, a CameraFrames camera and the observations. The public
``loss_*`` wrappers return the value together with reverse-mode gradients
with respect to every tensor argument.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from config.schemas import LOSS_TERMS
from utils.errors import ConfigError, ShapeError
from utils.geometry import DEPTH_EPSILON, CameraFrames, as_tensor, project_torch
from utils.synthetic_world import BodyModel, visibility_matrix

logger = logging.getLogger(__name__)

DEFAULT_HUBER_DELTA = 10.0


@dataclass
class LossBreakdown:
    """Per-term values, their weights and the weighted total."""
    l_2d: float = 0.0
    l_3d: float = 0.0
    l_beta: float = 0.0
    l_smooth: float = 0.0
    l_contact: float = 0.0
    l_hsr: float = 0.0
    l_coin_sds: float = 0.0
    weights: Dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(sum(self.weights.get(term, 0.0) * getattr(self, term) for term in LOSS_TERMS))

    def as_row(self) -> Dict[str, float]:
        row = {term: getattr(self, term) for term in LOSS_TERMS}
        row.update({f"w_{term}": self.weights.get(term, 0.0) for term in LOSS_TERMS})
        row["total"] = self.total
        return row


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

def shape_scale(beta: torch.Tensor) -> torch.Tensor:
    return torch.stack([1.0 + beta[0], 1.0 + beta[0], 1.0 + beta[1]])


def local_offsets(motion: torch.Tensor, beta: torch.Tensor, n_joints: int = 4) -> torch.Tensor:
    """Root-relative world joint offsets D(beta) theta (T, J, 3)."""
    theta = motion[:, 6:6 + 3 * n_joints].reshape(motion.shape[0], n_joints, 3)
    return theta * shape_scale(beta)


def body_joints(motion: torch.Tensor, beta: torch.Tensor, n_joints: int = 4) -> torch.Tensor:
    """World keypoints (T, 1 + J, 3): the root followed by the local joints."""
    root = motion[:, None, 0:3]
    return torch.cat([root, root + local_offsets(motion, beta, n_joints)], dim=1)


# ---------------------------------------------------------------------------
# Terms
# ---------------------------------------------------------------------------

def reprojection_term(joints: torch.Tensor, camera: CameraFrames, kp2d: torch.Tensor, confidence: torch.Tensor,
                      delta_px: float = DEFAULT_HUBER_DELTA) -> torch.Tensor:
    """Confidence-weighted Huber reprojection error, normalized by T * J."""
    points_cam = camera.to_camera(joints)
    in_front = (points_cam[..., 2] > DEPTH_EPSILON).detach()
    if not bool(in_front.all()):
        logger.warning(f"{int((~in_front).sum())} joints behind the camera ignored in the 2D loss")
    pixels = project_torch(points_cam, camera.intrinsics)
    per_coord = F.huber_loss(pixels, kp2d, reduction="none", delta=delta_px)
    weight = confidence * in_front.to(confidence.dtype)
    return (weight[..., None] * per_coord).sum() / (joints.shape[0] * joints.shape[1])


def local_pose_term(motion: torch.Tensor, beta: torch.Tensor, camera: CameraFrames,
                    local3d: torch.Tensor) -> torch.Tensor:
    """Mean squared distance between camera-frame root-relative joints and local3d."""
    n_joints = local3d.shape[1]
    offsets_cam = torch.einsum('tij,tnj->tni', camera.rotations, local_offsets(motion, beta, n_joints))
    return ((offsets_cam - local3d) ** 2).sum(-1).mean()


def smoothness_term(joints: torch.Tensor, orientation: torch.Tensor) -> torch.Tensor:
    """Mean squared second difference of joint positions plus that of the root orientation."""
    if joints.shape[0] < 3:
        raise ConfigError("the smoothness loss needs at least 3 frames")
    accel = joints[2:] - 2.0 * joints[1:-1] + joints[:-2]
    accel_orient = orientation[2:] - 2.0 * orientation[1:-1] + orientation[:-2]
    return (accel ** 2).sum(-1).mean() + (accel_orient ** 2).sum(-1).mean()


def contact_term(joints: torch.Tensor, labels: torch.Tensor, foot_indices=(0, 0, 1, 1)) -> torch.Tensor:
    """Sum of label * squared foot velocity, normalized by (T - 1) * 4."""
    feet = joints[:, [1 + j for j in foot_indices], :]
    velocity = feet[1:] - feet[:-1]
    return (labels[:-1] * (velocity ** 2).sum(-1)).sum() / (velocity.shape[0] * velocity.shape[1])


def shape_term(beta: torch.Tensor) -> torch.Tensor:
    return (beta ** 2).sum()


def hsr_term(joints: torch.Tensor, camera: CameraFrames, scene: torch.Tensor, indicator: torch.Tensor,
             nearest: torch.Tensor) -> torch.Tensor:
    """
    Human-scene depth ordering penalty.

    Scene points flagged as covered by the subject must lie behind the joint
    they project closest to; the indicator and nearest joints are constants.
    """
    world = camera.scene_to_world(scene)
    depth_points = camera.to_camera(world.expand(joints.shape[0], -1, -1))[..., 2]
    depth_joints = camera.to_camera(joints)[..., 2]
    depth_nearest = torch.gather(depth_joints, 1, nearest)
    violation = torch.clamp(depth_points - depth_nearest, max=0.0)
    return -(violation * indicator).sum() / scene.shape[0]


def hsr_indicators(joints: torch.Tensor, camera: CameraFrames, scene: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Frozen occlusion indicators and nearest joints for the current estimate."""
    with torch.no_grad():
        world = camera.scene_to_world(scene).cpu().numpy()
        rotations = camera.rotations.cpu().numpy()
        translations = camera.metric_translations().cpu().numpy()
        visible, nearest = visibility_matrix(world, joints.cpu().numpy(), rotations, translations, camera.intrinsics)
    return torch.as_tensor(visible, dtype=torch.float64), torch.as_tensor(nearest, dtype=torch.long)


def contact_labels(logits: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Binary contact labels from pseudo-ground-truth contact logits."""
    return (torch.sigmoid(logits.detach()) >= threshold).to(torch.float64)


# ---------------------------------------------------------------------------
# Value-and-gradient wrappers
# ---------------------------------------------------------------------------

def _value_and_grads(fn: Callable[..., torch.Tensor], **inputs) -> Tuple[float, Dict[str, torch.Tensor]]:
    leaves = {name: as_tensor(value).detach().clone().requires_grad_(True) for name, value in inputs.items()}
    value = fn(**leaves)
    grads = torch.autograd.grad(value, list(leaves.values()), allow_unused=True)
    return float(value.detach()), {name: (torch.zeros_like(leaves[name]) if g is None else g)
                                   for name, g in zip(leaves, grads)}


def _camera(rotations, translations, scale, reference: CameraFrames) -> CameraFrames:
    return CameraFrames(rotations, translations, scale, reference.center0, reference.first_rotation,
                        reference.intrinsics)


def _check_frames(motion, camera: CameraFrames) -> None:
    if motion.shape[0] != camera.n_frames:
        raise ShapeError(f"motion has {motion.shape[0]} frames but the camera has {camera.n_frames}")


def loss_2d(H, camera: CameraFrames, kp2d, confidence, body: Optional[BodyModel] = None, beta=None,
            delta_px: float = DEFAULT_HUBER_DELTA) -> Tuple[float, Dict[str, torch.Tensor]]:
    """Reprojection loss with gradients w.r.t. H, beta, camera rotations/translations and scale."""
    body = body or BodyModel()
    _check_frames(H, camera)
    beta = torch.zeros(2, dtype=torch.float64) if beta is None else beta
    kp2d, confidence = as_tensor(kp2d), as_tensor(confidence)

    def fn(H, beta, rotations, translations, scale):
        cam = _camera(rotations, translations, scale, camera)
        return reprojection_term(body_joints(H, beta, body.n_joints), cam, kp2d, confidence, delta_px)

    return _value_and_grads(fn, H=H, beta=beta, rotations=camera.rotations,
                            translations=camera.translations, scale=camera.scale)


def loss_3d(H, camera: CameraFrames, local3d, beta=None) -> Tuple[float, Dict[str, torch.Tensor]]:
    _check_frames(H, camera)
    beta = torch.zeros(2, dtype=torch.float64) if beta is None else beta
    local3d = as_tensor(local3d)

    def fn(H, beta, rotations):
        cam = _camera(rotations, camera.translations, camera.scale, camera)
        return local_pose_term(H, beta, cam, local3d)

    return _value_and_grads(fn, H=H, beta=beta, rotations=camera.rotations)


def loss_smooth(H, beta=None, n_joints: int = 4) -> Tuple[float, Dict[str, torch.Tensor]]:
    beta = torch.zeros(2, dtype=torch.float64) if beta is None else beta

    def fn(H, beta):
        return smoothness_term(body_joints(H, beta, n_joints), H[:, 3:6])

    return _value_and_grads(fn, H=H, beta=beta)


def loss_contact(H, labels, body: Optional[BodyModel] = None, beta=None) -> Tuple[float, Dict[str, torch.Tensor]]:
    body = body or BodyModel()
    beta = torch.zeros(2, dtype=torch.float64) if beta is None else beta
    labels = as_tensor(labels)

    def fn(H, beta):
        return contact_term(body_joints(H, beta, body.n_joints), labels, body.foot_indices)

    return _value_and_grads(fn, H=H, beta=beta)


def loss_beta(beta) -> Tuple[float, Dict[str, torch.Tensor]]:
    return _value_and_grads(lambda beta: shape_term(beta), beta=beta)


def loss_hsr(H, camera: CameraFrames, scene, body: Optional[BodyModel] = None, beta=None,
             indicator=None, nearest=None) -> Tuple[float, Dict[str, torch.Tensor]]:
    """
    Human-scene relation loss with gradients w.r.t. H, camera and scale.

    Indicators are computed from the inputs when not supplied and are held
    fixed while differentiating.
    """
    body = body or BodyModel()
    _check_frames(H, camera)
    beta = torch.zeros(2, dtype=torch.float64) if beta is None else beta
    scene = as_tensor(scene)
    if indicator is None or nearest is None:
        indicator, nearest = hsr_indicators(body_joints(as_tensor(H), as_tensor(beta), body.n_joints),
                                            camera, scene)
    indicator = as_tensor(indicator)
    nearest = torch.as_tensor(np.asarray(nearest) if not isinstance(nearest, torch.Tensor) else nearest,
                              dtype=torch.long)

    def fn(H, beta, rotations, translations, scale):
        cam = _camera(rotations, translations, scale, camera)
        return hsr_term(body_joints(H, beta, body.n_joints), cam, scene, indicator, nearest)

    return _value_and_grads(fn, H=H, beta=beta, rotations=camera.rotations,
                            translations=camera.translations, scale=camera.scale)
