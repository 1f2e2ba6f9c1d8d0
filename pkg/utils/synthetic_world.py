"""
Synthetic world for the motion/camera estimation pipeline.

Generates a walking stick-figure subject, a moving camera, a scene point cloud
and the noisy observations a monocular pipeline would see: 2D keypoints with
confidences, camera-frame 3D pose, a scale-ambiguous drifting camera estimate
and the scene in the camera estimate's units.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter1d

from config.schemas import CameraRigConfig, GaitParams, NoiseConfig, ScenarioConfig, SceneConfig
from config.settings import DEFAULT_OBS_NOISE
from models.diffusion_prior import MotionLayout, MotionWindow
from utils.errors import ConfigError, ShapeError
from utils.geometry import (
    DEPTH_EPSILON, Intrinsics, camera_centers, look_at, matrix_to_rotvec, mean_projected_spacing,
    orthonormalize, project as project_point, project_points, rot_z, rotvec_to_matrix, unwrap_rotvecs,
)

logger = logging.getLogger(__name__)

CONTACT_LOGIT = 4.0
OCCLUSION_RADIUS_FACTOR = 1.5
LOWER_BODY_JOINTS = (1, 2)


@dataclass(frozen=True)
class BodyModel:
    """Stick figure: root plus feet, head and a pelvis marker."""
    joint_names: Tuple[str, ...] = ("l_foot", "r_foot", "head", "pelvis_marker")
    rest_offsets: Tuple[Tuple[float, float, float], ...] = (
        (0.0, 0.1, -0.9), (0.0, -0.1, -0.9), (0.03, 0.0, 0.75), (0.12, 0.0, 0.0))
    foot_indices: Tuple[int, int, int, int] = (0, 0, 1, 1)

    def __post_init__(self):
        if len(self.foot_indices) != 4:
            raise ConfigError("foot_indices must pair each of the 4 contact logits with a joint")
        if len(self.rest_offsets) != len(self.joint_names):
            raise ConfigError("one rest offset per joint required")

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def n_keypoints(self) -> int:
        return self.n_joints + 1

    @staticmethod
    def shape_scale(beta) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        return np.array([1.0 + beta[0], 1.0 + beta[0], 1.0 + beta[1]])

    def joints(self, motion: MotionWindow, beta=(0.0, 0.0)) -> np.ndarray:
        """World keypoints (T, 1 + J, 3): root, then root + D(beta) theta_j."""
        offsets = motion.pose * self.shape_scale(beta)
        root = motion.translation[:, None, :]
        return np.concatenate([root, root + offsets], axis=1)


@dataclass
class CameraTrajectory:
    """Per-frame world-to-camera poses with pinhole intrinsics."""
    rotations: np.ndarray
    translations: np.ndarray
    intrinsics: Intrinsics = field(default_factory=Intrinsics)

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=float)
        self.translations = np.asarray(self.translations, dtype=float)
        if self.rotations.shape[1:] != (3, 3) or self.translations.shape != (len(self.rotations), 3):
            raise ShapeError("camera trajectory needs (T, 3, 3) rotations and (T, 3) translations")
        gram = np.einsum('tij,tkj->tik', self.rotations, self.rotations)
        if not np.allclose(gram, np.eye(3), atol=1e-9) or np.any(np.linalg.det(self.rotations) < 0):
            raise ShapeError("camera rotations must be proper orthonormal matrices")

    @property
    def n_frames(self) -> int:
        return len(self.rotations)

    def centers(self) -> np.ndarray:
        return camera_centers(self.rotations, self.translations)

    def relative_to_first(self) -> "CameraTrajectory":
        """Poses expressed relative to the first camera frame."""
        rel_rot = self.rotations @ self.rotations[0].T
        rel_trans = self.translations - np.einsum('tij,j->ti', rel_rot, self.translations[0])
        return CameraTrajectory(rel_rot, rel_trans, self.intrinsics)

    def slice(self, start: int, stop: int) -> "CameraTrajectory":
        return CameraTrajectory(self.rotations[start:stop], self.translations[start:stop], self.intrinsics)


@dataclass
class Scene:
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 1:
            raise ShapeError("scene needs at least one 3D point")
        if not np.all(np.isfinite(self.points)):
            raise ShapeError("scene points must be finite")


@dataclass
class ObservationSet:
    """
    What the estimator sees.

    ``cam_est`` holds camera poses relative to the first frame with the
    translation in unknown units (true metric translation divided by the true
    scale, plus drift). ``first_rotation`` is the estimated world-to-first-camera
    rotation (gravity direction and heading). ``scene_est`` lives in the first
    camera frame in the same units as ``cam_est``.
    """
    kp2d: np.ndarray
    confidence: np.ndarray
    local3d: np.ndarray
    root_cam: np.ndarray
    root_orient_cam: np.ndarray
    cam_est: CameraTrajectory
    first_rotation: np.ndarray
    scene_est: Scene
    occluded: np.ndarray
    fps: float = 30.0

    def __post_init__(self):
        if np.any(self.confidence < 0) or np.any(self.confidence > 1):
            raise ShapeError("keypoint confidences must lie in [0, 1]")
        if self.kp2d.shape[:2] != self.confidence.shape or self.local3d.shape[0] != self.kp2d.shape[0]:
            raise ShapeError("observation arrays disagree in length")

    @property
    def n_frames(self) -> int:
        return self.kp2d.shape[0]

    @property
    def n_joints(self) -> int:
        return self.local3d.shape[1]

    def slice(self, start: int, stop: int) -> "ObservationSet":
        return ObservationSet(self.kp2d[start:stop], self.confidence[start:stop], self.local3d[start:stop],
                              self.root_cam[start:stop], self.root_orient_cam[start:stop],
                              self.cam_est.slice(start, stop), self.first_rotation, self.scene_est,
                              self.occluded[start:stop], self.fps)


@dataclass
class GroundTruth:
    motion: MotionWindow
    contacts: np.ndarray
    camera: CameraTrajectory
    scene: Scene
    body: BodyModel
    scale_true: float
    fps: float

    @property
    def n_frames(self) -> int:
        return self.motion.n_frames

    def joints(self) -> np.ndarray:
        return self.body.joints(self.motion)


# ---------------------------------------------------------------------------
# Subject
# ---------------------------------------------------------------------------

def _root_path(params: GaitParams, time: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Planar root position and heading at the given times (constant turn rate)."""
    psi = params.heading + params.turn_rate * time
    if abs(params.turn_rate) > 1e-12:
        radius = params.speed / params.turn_rate
        x = radius * (np.sin(psi) - np.sin(params.heading))
        y = -radius * (np.cos(psi) - np.cos(params.heading))
    else:
        x = params.speed * time * np.cos(params.heading)
        y = params.speed * time * np.sin(params.heading)
    return np.stack([x, y], axis=-1), psi


def _foot_nominal(params: GaitParams, time: np.ndarray, side: float) -> np.ndarray:
    xy, psi = _root_path(params, time)
    left = np.stack([-np.sin(psi), np.cos(psi)], axis=-1)
    return xy + side * params.foot_width * left


def _foot_track(params: GaitParams, time: np.ndarray, side: float, phase_offset: float) -> np.ndarray:
    if params.speed == 0.0:
        xy = _foot_nominal(params, time, side)
        return np.concatenate([xy, np.zeros((len(time), 1))], axis=1)
    period = params.stride_period
    stance = params.stance_fraction
    u = time / period - phase_offset
    cycle = np.floor(u)
    frac = u - cycle
    plant_now = _foot_nominal(params, (cycle + phase_offset + stance / 2.0) * period, side)
    plant_next = _foot_nominal(params, (cycle + 1.0 + phase_offset + stance / 2.0) * period, side)
    s = np.clip((frac - stance) / (1.0 - stance), 0.0, 1.0)
    blend = 3.0 * s ** 2 - 2.0 * s ** 3
    xy = plant_now + blend[:, None] * (plant_next - plant_now)
    z = np.where(frac < stance, 0.0, params.step_height * np.sin(np.pi * s) ** 2)
    return np.concatenate([xy, z[:, None]], axis=1)


def contact_from_positions(positions: np.ndarray, threshold: float) -> np.ndarray:
    """Contact = per-frame displacement below ``threshold`` (last frame reuses the previous step)."""
    if len(positions) < 2:
        return np.ones(len(positions), dtype=bool)
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=-1)
    steps = np.concatenate([steps, steps[-1:]])
    return steps < threshold


def generate_motion(params: GaitParams, T: int, seed: int = 0, fps: float = 30.0,
                    body: Optional[BodyModel] = None) -> Tuple[MotionWindow, np.ndarray]:
    """
    Procedural locomotion along a constant-curvature path.

    Feet alternate planted stance phases with smooth swing arcs, so a foot is
    exactly stationary while planted.

    Args:
        params: Gait parameters
        T: Number of frames
        seed: Unused by the deterministic gait; kept for a uniform generator signature
        fps: Frame rate

    Returns:
        Motion window and (T, 4) binary contact labels
    """
    if T < 2:
        raise ConfigError("at least 2 frames are required")
    if params.stride_period <= 0:
        raise ConfigError("stride period must be positive")
    body = body or BodyModel()
    time = np.arange(T) / fps
    xy, psi = _root_path(params, time)
    phase = time / params.stride_period
    bob = params.bob_amplitude * np.cos(4.0 * np.pi * phase) if params.speed > 0 else np.zeros(T)
    root = np.concatenate([xy, (params.hip_height + bob)[:, None]], axis=1)
    orientation = np.stack([np.zeros(T), np.zeros(T), psi], axis=1)

    feet = [_foot_track(params, time, side=1.0, phase_offset=0.0),
            _foot_track(params, time, side=-1.0, phase_offset=0.5)]
    heading_rot = np.stack([rot_z(p) for p in psi])
    head = root + heading_rot @ np.asarray(body.rest_offsets[2])
    pelvis = root + heading_rot @ np.asarray(body.rest_offsets[3])
    joints = np.stack([feet[0], feet[1], head, pelvis], axis=1)
    pose = joints - root[:, None, :]

    foot_contact = [contact_from_positions(f, params.contact_speed) for f in feet]
    contacts = np.stack([foot_contact[j] for j in body.foot_indices], axis=1).astype(float)
    logits = np.where(contacts > 0, CONTACT_LOGIT, -CONTACT_LOGIT)
    return MotionWindow.from_parts(root, orientation, pose, logits), contacts


# ---------------------------------------------------------------------------
# Camera
# ---------------------------------------------------------------------------

def _band_limited(rng: np.random.Generator, shape, sigma_frames: float, std: float) -> np.ndarray:
    if std == 0.0:
        return np.zeros(shape)
    noise = gaussian_filter1d(rng.standard_normal(shape), sigma_frames, axis=0, mode="nearest")
    spread = noise.std(axis=0, keepdims=True)
    return std * noise / np.where(spread > 0, spread, 1.0)


def generate_camera(style, T: int, seed: int = 0, subject: Optional[np.ndarray] = None,
                    headings: Optional[np.ndarray] = None, fps: float = 30.0,
                    rig: Optional[CameraRigConfig] = None) -> CameraTrajectory:
    """
    Smooth camera trajectory looking at the subject.

    Eye and target positions are placed at knots every ``knot_spacing`` frames
    and interpolated with cubic splines; handheld adds band-limited rotation
    and position jitter.

    Args:
        style: orbit, follow or handheld (overrides ``rig.style``)
        T: Number of frames
        seed: Jitter seed
        subject: (T, 3) root positions to look at; defaults to a standing subject
        headings: (T,) subject headings used by follow and handheld
        rig: Remaining rig parameters
    """
    if T < 2:
        raise ConfigError("at least 2 frames are required")
    if style not in ("orbit", "follow", "handheld"):
        raise ConfigError(f"unknown camera style '{style}'")
    rig = (rig or CameraRigConfig()).model_copy(update={"style": style})
    rng = np.random.default_rng(seed)
    subject = np.zeros((T, 3)) + np.array([0.0, 0.0, 0.9]) if subject is None else np.asarray(subject, dtype=float)
    headings = np.zeros(T) if headings is None else np.asarray(headings, dtype=float)
    time = np.arange(T) / fps

    knots = np.unique(np.concatenate([np.arange(0, T, rig.knot_spacing), [T - 1]]))
    target_knots = subject[knots]
    if rig.style == "orbit":
        angle = rig.side_angle + rig.orbit_rate * time[knots]
    else:
        spread = rig.side_angle if rig.style == "follow" else 1.5 * rig.side_angle
        angle = headings[knots] + np.pi + spread
    eye_knots = np.stack([target_knots[:, 0] + rig.radius * np.cos(angle),
                          target_knots[:, 1] + rig.radius * np.sin(angle),
                          np.full(len(knots), rig.height)], axis=1)

    if len(knots) >= 2:
        eyes = CubicSpline(knots, eye_knots, axis=0)(np.arange(T))
        targets = CubicSpline(knots, target_knots, axis=0)(np.arange(T))
    else:
        eyes, targets = eye_knots.repeat(T, axis=0), target_knots.repeat(T, axis=0)

    if rig.style == "handheld":
        eyes = eyes + _band_limited(rng, (T, 3), 3.0, rig.jitter_position)
    rotations = np.stack([look_at(e, g) for e, g in zip(eyes, targets)])
    if rig.style == "handheld":
        jitter = _band_limited(rng, (T, 3), 3.0, rig.jitter_rotation)
        rotations = rotvec_to_matrix(jitter) @ rotations
    rotations = orthonormalize(rotations)
    translations = -np.einsum('tij,tj->ti', rotations, eyes)
    return CameraTrajectory(rotations, translations, Intrinsics.square(rig.focal, rig.image_size))


def project(cam: CameraTrajectory, i: int, point: np.ndarray) -> Tuple[np.ndarray, float]:
    """Pixel and depth of a world point in frame i."""
    return project_point(cam.rotations[i], cam.translations[i], cam.intrinsics, point)


# ---------------------------------------------------------------------------
# Scene
# ---------------------------------------------------------------------------

def generate_scene(cfg: SceneConfig, subject: np.ndarray, camera: CameraTrajectory, seed: int) -> Scene:
    """Cylindrical wall enclosing the subject path and every camera centre."""
    rng = np.random.default_rng(seed)
    anchors = np.concatenate([subject[:, :2], camera.centers()[:, :2]])
    center = anchors.mean(axis=0)
    radius = np.linalg.norm(anchors - center, axis=1).max() + cfg.margin
    angle = rng.uniform(0.0, 2.0 * np.pi, cfg.n_points)
    height = rng.uniform(0.0, cfg.wall_height, cfg.n_points)
    points = np.stack([center[0] + radius * np.cos(angle), center[1] + radius * np.sin(angle), height], axis=1)
    return Scene(points)


# ---------------------------------------------------------------------------
# Visibility
# ---------------------------------------------------------------------------

def occlusion_radius(joint_pixels: np.ndarray) -> np.ndarray:
    """Per-frame occlusion radius from the projected root-to-joint spacing."""
    return OCCLUSION_RADIUS_FACTOR * mean_projected_spacing(joint_pixels)


def visibility_matrix(points: np.ndarray, joints: np.ndarray, rotations: np.ndarray, translations: np.ndarray,
                      intrinsics: Intrinsics, r_occ: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Occluded-by-subject indicator for every (frame, point).

    Args:
        points: (N, 3) or (T, N, 3) world points
        joints: (T, J, 3) world keypoints
        rotations, translations: Per-frame world-to-camera poses
        r_occ: Optional (T,) pixel radius; defaults to ``occlusion_radius``

    Returns:
        (T, N) indicator and (T, N) index of the nearest joint in the image
    """
    T = len(joints)
    pts = np.broadcast_to(points, (T,) + points.shape[-2:])
    pix_p, depth_p = project_points(rotations, translations, intrinsics, pts)
    pix_j, depth_j = project_points(rotations, translations, intrinsics, joints)
    if r_occ is None:
        r_occ = occlusion_radius(pix_j)
    dist = np.linalg.norm(pix_p[:, :, None, :] - pix_j[:, None, :, :], axis=-1)
    nearest = dist.argmin(axis=-1)
    nearest_dist = np.take_along_axis(dist, nearest[..., None], axis=-1)[..., 0]
    joint_in_front = depth_j[np.arange(T)[:, None], nearest]
    visible = (nearest_dist <= np.asarray(r_occ)[:, None]) & (depth_p > DEPTH_EPSILON) & (joint_in_front > DEPTH_EPSILON)
    return visible, nearest


def visibility_indicator(point: np.ndarray, i: int, motion: MotionWindow, cam: CameraTrajectory,
                         body: Optional[BodyModel] = None, r_occ: Optional[float] = None) -> int:
    """1 when the point projects within r_occ pixels of its nearest projected joint in frame i."""
    body = body or BodyModel()
    joints = body.joints(motion)[i:i + 1]
    radius = None if r_occ is None else np.array([r_occ])
    visible, _ = visibility_matrix(np.asarray(point, dtype=float)[None], joints, cam.rotations[i:i + 1],
                                   cam.translations[i:i + 1], cam.intrinsics, radius)
    return int(visible[0, 0])


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------

def _occlusion_events(rng: np.random.Generator, T: int, n_keypoints: int, noise: NoiseConfig) -> np.ndarray:
    occluded = np.zeros((T, n_keypoints), dtype=bool)
    for start in range(0, T, noise.occlusion_block):
        block = slice(start, start + noise.occlusion_block)
        if rng.random() < noise.lower_body_prob:
            occluded[block, list(LOWER_BODY_JOINTS)] = True
        if rng.random() < noise.full_pose_prob:
            occluded[block, 1:] = True
        per_joint = rng.random(n_keypoints - 1) < noise.joint_prob
        if rng.random() < noise.joint_event_prob:
            occluded[block, 1:] |= per_joint
    return occluded


def simulate_observations(motion: MotionWindow, contacts: np.ndarray, cam: CameraTrajectory, scene: Scene,
                          noise_cfg: NoiseConfig, seed: int, scale_true: float = 1.0,
                          body: Optional[BodyModel] = None, fps: float = 30.0) -> ObservationSet:
    """
    Simulate detector, local-pose estimator and SLAM outputs.

    Args:
        motion: Ground-truth world motion
        contacts: Ground-truth contact labels (kept for the simulator's signature; not observed)
        cam: Ground-truth camera
        scene: Ground-truth scene in world coordinates
        noise_cfg: Noise levels and occlusion probabilities
        seed: Observation noise seed
        scale_true: Factor dividing every metric translation of the camera estimate

    Returns:
        ObservationSet
    """
    body = body or BodyModel()
    rng = np.random.default_rng(seed)
    T = motion.n_frames
    R, t, intr = cam.rotations, cam.translations, cam.intrinsics
    joints = body.joints(motion)
    n_kp = joints.shape[1]

    pixels, depth = project_points(R, t, intr, joints)
    if np.any(depth <= DEPTH_EPSILON):
        logger.warning(f"{int((depth <= DEPTH_EPSILON).sum())} keypoints lie behind the camera")
    occluded = _occlusion_events(rng, T, n_kp, noise_cfg)
    outlier = rng.random((T, n_kp)) < noise_cfg.outlier_prob
    directions = rng.standard_normal((T, n_kp, 2))
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    pixel_noise = rng.standard_normal((T, n_kp, 2)) * noise_cfg.pixel_sigma
    pixel_noise = np.where(occluded[..., None], 5.0 * pixel_noise, pixel_noise)
    kp2d = pixels + pixel_noise + outlier[..., None] * noise_cfg.outlier_pixels * directions
    noise_proxy = min(1.0, noise_cfg.pixel_sigma / 50.0)
    confidence = np.clip(1.0 - occluded - 0.5 * outlier - noise_proxy, 0.0, 1.0)

    local3d = np.einsum('tij,tnj->tni', R, motion.pose) + rng.standard_normal(motion.pose.shape) * noise_cfg.pose
    root_cam = np.einsum('tij,tj->ti', R, motion.translation) + t \
        + rng.standard_normal((T, 3)) * noise_cfg.translation
    root_rot_cam = R @ rotvec_to_matrix(motion.orientation)
    root_rot_cam = rotvec_to_matrix(rng.standard_normal((T, 3)) * noise_cfg.orientation) @ root_rot_cam
    root_orient_cam = unwrap_rotvecs(matrix_to_rotvec(root_rot_cam))

    relative = cam.relative_to_first()
    jitter = rng.standard_normal((T, 3)) * noise_cfg.rotation_jitter
    jitter[0] = 0.0
    rel_rot = orthonormalize(rotvec_to_matrix(jitter) @ relative.rotations)
    drift = np.cumsum(rng.standard_normal((T, 3)) * noise_cfg.drift_sigma, axis=0)
    drift -= drift[0]
    rel_trans = relative.translations / scale_true + drift
    cam_est = CameraTrajectory(rel_rot, rel_trans, intr)
    first_rotation = rotvec_to_matrix(rng.standard_normal(3) * noise_cfg.gravity_sigma) @ R[0]

    scene_cam = (scene.points @ R[0].T + t[0]) / scale_true
    scene_est = Scene(scene_cam + rng.standard_normal(scene_cam.shape) * noise_cfg.scene_sigma)

    return ObservationSet(kp2d, confidence, local3d, root_cam, root_orient_cam, cam_est, first_rotation,
                          scene_est, occluded, fps)


# ---------------------------------------------------------------------------
# Scenarios and training data
# ---------------------------------------------------------------------------

def build_scenario(config: ScenarioConfig, seed: Optional[int] = None) -> GroundTruth:
    """
    Ground truth for a scenario file.

    The world gauge places the first camera centre at the horizontal origin.
    """
    seed = config.seed if seed is None else seed
    body = BodyModel()
    motion, contacts = generate_motion(config.gait, config.n_frames, seed, config.fps, body)
    camera = generate_camera(config.camera.style, config.n_frames, seed + 1, motion.translation,
                             motion.orientation[:, 2], config.fps, config.camera)
    shift = np.array([*camera.centers()[0, :2], 0.0])
    frames = motion.frames.copy()
    frames[:, 0:3] -= shift
    motion = MotionWindow(frames, motion.n_joints)
    translations = camera.translations + np.einsum('tij,j->ti', camera.rotations, shift)
    camera = CameraTrajectory(camera.rotations, translations, camera.intrinsics)
    scene = generate_scene(config.scene, motion.translation, camera, seed + 2)
    logger.info(f"Built scenario '{config.name}' ({config.n_frames} frames, {config.camera.style} camera, "
                f"scale {config.scale_true:g})")
    return GroundTruth(motion, contacts, camera, scene, body, config.scale_true, config.fps)


def observe(truth: GroundTruth, noise: NoiseConfig, seed: int) -> ObservationSet:
    return simulate_observations(truth.motion, truth.contacts, truth.camera, truth.scene, noise, seed,
                                 truth.scale_true, truth.body, truth.fps)


def random_gait(rng: np.random.Generator) -> GaitParams:
    return GaitParams(speed=float(rng.uniform(0.0, 1.8)), turn_rate=float(rng.uniform(-0.6, 0.6)),
                      heading=float(rng.uniform(-np.pi, np.pi)), stride_period=float(rng.uniform(0.9, 1.3)),
                      stance_fraction=float(rng.uniform(0.55, 0.65)), step_height=float(rng.uniform(0.05, 0.12)),
                      hip_height=float(rng.uniform(0.85, 0.95)))


def generate_corpus(n_windows: int, n_frames: int, seed: int, fps: float = 30.0) -> np.ndarray:
    """Flattened random-gait windows (n_windows, D) for fitting a motion prior."""
    if n_windows < 1:
        raise ConfigError("corpus needs at least one window")
    rng = np.random.default_rng(seed)
    body = BodyModel()
    rows = []
    for _ in range(n_windows):
        motion, _ = generate_motion(random_gait(rng), n_frames, 0, fps, body)
        rows.append(motion.flatten())
    return np.stack(rows)


def sample_training_control(window: np.ndarray, layout: MotionLayout, rng: np.random.Generator,
                            noise: Optional[Dict[str, float]] = None, trajectory_prob: float = 0.5,
                            orientation_prob: float = 0.5, lower_body_prob: float = 0.2,
                            full_pose_prob: float = 0.2, joint_event_prob: float = 0.5,
                            joint_prob: float = 0.3) -> Tuple[np.ndarray, np.ndarray]:
    """
    Noisy, partially masked copy of a flattened window.

    Returns:
        Observed values (noisy on every channel) and the binary mask
    """
    noise = {**DEFAULT_OBS_NOISE, **(noise or {})}
    frames = layout.unflatten(np.asarray(window, dtype=float)).copy()
    mask = np.ones_like(frames)
    mask[:, layout.contact] = 0.0
    if rng.random() < trajectory_prob:
        mask[:, layout.translation] = 0.0
    if rng.random() < orientation_prob:
        mask[:, layout.orientation] = 0.0
    pose_mask = np.ones(layout.n_joints, dtype=bool)
    if rng.random() < lower_body_prob:
        pose_mask[[j - 1 for j in LOWER_BODY_JOINTS]] = False
    if rng.random() < full_pose_prob:
        pose_mask[:] = False
    if rng.random() < joint_event_prob:
        pose_mask &= rng.random(layout.n_joints) >= joint_prob
    mask[:, layout.pose] *= np.repeat(pose_mask, 3).astype(float)

    sigma = np.zeros(layout.frame_dim)
    sigma[layout.translation] = noise["translation"]
    sigma[layout.orientation] = noise["orientation"]
    sigma[layout.pose] = noise["pose"]
    values = frames + rng.standard_normal(frames.shape) * sigma
    return layout.flatten(values), layout.flatten(mask)
