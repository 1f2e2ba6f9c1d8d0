"""
Rotation, pinhole-camera and rigid-transform helpers.

World frame is z-up. Cameras use the computer-vision convention (x right,
y down, z forward) and map a world point p to R p + t.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
from scipy.spatial.transform import Rotation, Slerp

from utils.errors import BehindCameraError, ShapeError

DEPTH_EPSILON = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""
    focal: float = 1000.0
    cx: float = 500.0
    cy: float = 500.0
    width: int = 1000
    height: int = 1000

    @classmethod
    def square(cls, focal: float, size: int) -> "Intrinsics":
        return cls(focal=focal, cx=size / 2.0, cy=size / 2.0, width=size, height=size)

    def to_array(self) -> np.ndarray:
        return np.array([self.focal, self.cx, self.cy, self.width, self.height], dtype=float)

    @classmethod
    def from_array(cls, values) -> "Intrinsics":
        values = np.asarray(values, dtype=float)
        return cls(float(values[0]), float(values[1]), float(values[2]), int(values[3]), int(values[4]))


# --- numpy rotations -------------------------------------------------------

def rotvec_to_matrix(rotvec: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_matrix()


def matrix_to_rotvec(matrix: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(matrix, dtype=float)).as_rotvec()


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def orthonormalize(matrices: np.ndarray) -> np.ndarray:
    """Project (..., 3, 3) matrices onto SO(3) with an SVD."""
    u, _, vt = np.linalg.svd(matrices)
    det = np.linalg.det(u @ vt)
    fix = np.ones(u.shape[:-1])
    fix[..., -1] = np.sign(det)
    return (u * fix[..., None, :]) @ vt


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera rotation whose rows are (right, down, forward)."""
    forward = np.asarray(target, dtype=float) - np.asarray(eye, dtype=float)
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=float))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


def unwrap_rotvecs(rotvecs: np.ndarray) -> np.ndarray:
    """
    Replace each rotation vector by the equivalent one closest to its predecessor.

    Rotation vectors r and r - 2*pi*k*r/|r| describe the same rotation; picking
    the nearest representative keeps sequences continuous across +-pi.
    """
    rotvecs = np.array(rotvecs, dtype=float)
    for i in range(1, len(rotvecs)):
        rotvecs[i] = nearest_equivalent_rotvec(rotvecs[i], rotvecs[i - 1])
    return rotvecs


def nearest_equivalent_rotvec(rotvec: np.ndarray, reference: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(rotvec)
    if angle < 1e-12:
        return rotvec
    axis = rotvec / angle
    candidates = [rotvec + 2.0 * np.pi * k * axis for k in range(-3, 4)]
    distances = [np.linalg.norm(c - reference) for c in candidates]
    return candidates[int(np.argmin(distances))]


def blend_rotvecs(first: np.ndarray, second: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """
    Per-frame spherical interpolation between two rotation-vector sequences.

    Returns rotation vectors unwrapped to stay near ``first``; identical inputs
    come back unchanged.
    """
    first = np.asarray(first, dtype=float)
    second = np.asarray(second, dtype=float)
    out = np.empty_like(first)
    for i, w in enumerate(np.asarray(weights, dtype=float)):
        if np.array_equal(first[i], second[i]) or w == 0.0:
            out[i] = first[i]
            continue
        if w == 1.0:
            out[i] = second[i]
            continue
        key_rots = Rotation.from_rotvec(np.stack([first[i], second[i]]))
        rv = Slerp([0.0, 1.0], key_rots)([w]).as_rotvec()[0]
        out[i] = nearest_equivalent_rotvec(rv, first[i])
    return out


def blend_rotations(first: np.ndarray, second: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-frame slerp between two (T, 3, 3) rotation sequences."""
    out = np.empty_like(first)
    for i, w in enumerate(np.asarray(weights, dtype=float)):
        if w == 0.0 or np.array_equal(first[i], second[i]):
            out[i] = first[i]
        elif w == 1.0:
            out[i] = second[i]
        else:
            key_rots = Rotation.from_matrix(np.stack([first[i], second[i]]))
            out[i] = Slerp([0.0, 1.0], key_rots)([w]).as_matrix()[0]
    return out


def geodesic_degrees(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Angle of R1^T R2 in degrees for (..., 3, 3) stacks."""
    relative = np.swapaxes(first, -1, -2) @ second
    cos = (np.trace(relative, axis1=-2, axis2=-1) - 1.0) / 2.0
    skew = relative - np.swapaxes(relative, -1, -2)
    sin = 0.5 * np.sqrt(skew[..., 2, 1] ** 2 + skew[..., 0, 2] ** 2 + skew[..., 1, 0] ** 2)
    return np.degrees(np.arctan2(sin, cos))


# --- numpy pinhole ---------------------------------------------------------

def project(rotation: np.ndarray, translation: np.ndarray, intrinsics: Intrinsics,
            point: np.ndarray, depth_epsilon: float = DEPTH_EPSILON) -> Tuple[np.ndarray, float]:
    """
    Project a world point through one camera frame.

    Args:
        rotation: (3, 3) world-to-camera rotation
        translation: (3,) world-to-camera translation
        intrinsics: Pinhole intrinsics
        point: (3,) world point

    Returns:
        Pixel coordinates and depth of the transformed point
    """
    p_cam = np.asarray(rotation) @ np.asarray(point, dtype=float) + np.asarray(translation)
    depth = float(p_cam[2])
    if depth <= depth_epsilon:
        raise BehindCameraError(f"point at depth {depth:.3g} is behind the camera")
    pixel = np.array([intrinsics.focal * p_cam[0] / depth + intrinsics.cx,
                      intrinsics.focal * p_cam[1] / depth + intrinsics.cy])
    return pixel, depth


def unproject(rotation: np.ndarray, translation: np.ndarray, intrinsics: Intrinsics,
              pixel: np.ndarray, depth: float) -> np.ndarray:
    """Inverse of project: world point seen at ``pixel`` with camera depth ``depth``."""
    x = (pixel[0] - intrinsics.cx) / intrinsics.focal * depth
    y = (pixel[1] - intrinsics.cy) / intrinsics.focal * depth
    p_cam = np.array([x, y, depth])
    return np.asarray(rotation).T @ (p_cam - np.asarray(translation))


def project_points(rotations: np.ndarray, translations: np.ndarray, intrinsics: Intrinsics,
                   points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorized projection without the behind-camera check.

    Args:
        rotations: (T, 3, 3)
        translations: (T, 3)
        points: (T, N, 3) world points

    Returns:
        (T, N, 2) pixels and (T, N) depths
    """
    p_cam = np.einsum('tij,tnj->tni', rotations, points) + translations[:, None, :]
    depth = p_cam[..., 2]
    safe = np.where(np.abs(depth) < DEPTH_EPSILON, DEPTH_EPSILON, depth)
    pixels = np.stack([intrinsics.focal * p_cam[..., 0] / safe + intrinsics.cx,
                       intrinsics.focal * p_cam[..., 1] / safe + intrinsics.cy], axis=-1)
    return pixels, depth


# --- torch counterparts ----------------------------------------------------

def so3_exp(rotvec: torch.Tensor) -> torch.Tensor:
    """Rodrigues map (..., 3) -> (..., 3, 3), differentiable at zero."""
    theta_sq = (rotvec * rotvec).sum(-1, keepdim=True)
    small = theta_sq < 1e-12
    theta_sq_safe = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    theta = torch.sqrt(theta_sq_safe)
    a = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / theta_sq_safe)
    zero = torch.zeros_like(rotvec[..., 0])
    x, y, z = rotvec[..., 0], rotvec[..., 1], rotvec[..., 2]
    skew = torch.stack([
        torch.stack([zero, -z, y], -1),
        torch.stack([z, zero, -x], -1),
        torch.stack([-y, x, zero], -1),
    ], -2)
    eye = torch.eye(3, dtype=rotvec.dtype).expand(skew.shape)
    return eye + a[..., None] * skew + b[..., None] * (skew @ skew)


def project_torch(points_cam: torch.Tensor, intrinsics: Intrinsics) -> torch.Tensor:
    """Pinhole projection of camera-frame points (..., 3) -> (..., 2)."""
    depth = points_cam[..., 2].clamp(min=DEPTH_EPSILON)
    return torch.stack([intrinsics.focal * points_cam[..., 0] / depth + intrinsics.cx,
                        intrinsics.focal * points_cam[..., 1] / depth + intrinsics.cy], -1)


@dataclass
class CameraFrames:
    """
    Differentiable per-frame camera of the joint problem.

    A world point p maps to R_i (p - c0) + s * t_i where c0 is the first
    camera centre, t_i the unit-scale relative translation and s the metric
    scale. Scene points are stored in the first-camera frame in the same
    units as t_i.
    """
    rotations: torch.Tensor
    translations: torch.Tensor
    scale: torch.Tensor
    center0: torch.Tensor
    first_rotation: torch.Tensor
    intrinsics: Intrinsics

    def __post_init__(self):
        if self.rotations.shape[-2:] != (3, 3) or self.translations.shape[-1] != 3:
            raise ShapeError("camera rotations must be (T, 3, 3) and translations (T, 3)")
        if self.rotations.shape[0] != self.translations.shape[0]:
            raise ShapeError("camera rotations and translations differ in length")

    @property
    def n_frames(self) -> int:
        return self.rotations.shape[0]

    def metric_translations(self) -> torch.Tensor:
        return self.scale * self.translations - torch.einsum('tij,j->ti', self.rotations, self.center0)

    def to_camera(self, points: torch.Tensor) -> torch.Tensor:
        """World points (T, N, 3) to camera frame."""
        return torch.einsum('tij,tnj->tni', self.rotations, points) + self.metric_translations()[:, None, :]

    def to_world(self, points_cam: torch.Tensor) -> torch.Tensor:
        """Camera-frame points (T, N, 3) back to the world."""
        shifted = points_cam - self.metric_translations()[:, None, :]
        return torch.einsum('tji,tnj->tni', self.rotations, shifted)

    def scene_to_world(self, scene: torch.Tensor) -> torch.Tensor:
        """Scene points (N, 3) in the first-camera frame to metric world points."""
        return self.center0 + self.scale * scene @ self.first_rotation

    def centers(self) -> torch.Tensor:
        return -torch.einsum('tji,tj->ti', self.rotations, self.metric_translations())

    def detach(self) -> "CameraFrames":
        return CameraFrames(self.rotations.detach(), self.translations.detach(), self.scale.detach(),
                            self.center0.detach(), self.first_rotation.detach(), self.intrinsics)

    @classmethod
    def from_world(cls, rotations: np.ndarray, translations: np.ndarray, intrinsics: Intrinsics,
                   dtype=torch.float64) -> "CameraFrames":
        """Wrap an ordinary world-to-camera trajectory (unit scale, zero centre offset)."""
        return cls(torch.as_tensor(rotations, dtype=dtype), torch.as_tensor(translations, dtype=dtype),
                   torch.ones((), dtype=dtype), torch.zeros(3, dtype=dtype),
                   torch.as_tensor(rotations[0], dtype=dtype), intrinsics)


def camera_centers(rotations: np.ndarray, translations: np.ndarray) -> np.ndarray:
    return -np.einsum('tji,tj->ti', rotations, translations)


def mean_projected_spacing(pixels: np.ndarray) -> np.ndarray:
    """Mean 2D distance from the root (index 0) to the other joints, per frame."""
    return np.linalg.norm(pixels[:, 1:, :] - pixels[:, :1, :], axis=-1).mean(axis=1)


def as_tensor(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def maybe_numpy(x) -> Optional[np.ndarray]:
    if x is None:
        return None
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)
