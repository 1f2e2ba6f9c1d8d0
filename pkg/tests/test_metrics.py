from types import SimpleNamespace

import numpy as np
import pytest

from utils.errors import ConfigError, DegenerateAlignmentError, ShapeError
from utils.geometry import rot_z, rotvec_to_matrix
from utils.metrics import (
    Alignment, _chunks, accel_error, ate, evaluate_motion, evaluate_solution, pa_mpjpe, procrustes, rte_roe,
    scale_error, w_mpjpe, w_rje, wa_mpjpe,
)


@pytest.fixture
def joints(rng):
    return rng.normal(size=(12, 5, 3))


@pytest.fixture
def centers():
    time = np.linspace(0.0, 1.0, 20)
    return np.stack([np.cos(2.0 * time), np.sin(2.0 * time), 1.5 + 0.1 * time], axis=1)


def test_identical_inputs_score_zero(joints, centers):
    orient = np.zeros((12, 3))
    report = evaluate_motion(joints, joints, orient, orient, centers[:12], centers[:12])
    for name, value in report.items():
        assert value == pytest.approx(0.0, abs=1e-9), name


def test_scaled_trajectory_has_zero_similarity_ate(centers):
    doubled = 2.0 * centers
    assert ate(doubled, centers) == pytest.approx(0.0, abs=1e-12)
    rigid = ate(doubled, centers, with_scale=False)
    assert rigid > 0.1
    assert ate(doubled, centers) <= rigid


def test_acceleration_error_of_a_single_spike():
    T, J, dt, a = 10, 3, 1.0 / 30.0, 0.02
    gt = np.zeros((T, J, 3))
    pred = gt.copy()
    pred[5, 1, 0] = a
    assert accel_error(pred, gt, dt) == pytest.approx(4.0 * a / ((T - 2) * J * dt ** 2))


def test_acceleration_error_needs_three_frames():
    with pytest.raises(ConfigError):
        accel_error(np.zeros((2, 1, 3)), np.zeros((2, 1, 3)))


def test_root_orientation_error_in_degrees():
    T = 6
    gt_orient = np.zeros((T, 3))
    gt_orient[1:, 2] = np.radians(10.0)
    result = rte_roe(np.zeros((T, 3)), np.zeros((T, 3)), np.zeros((T, 3)), gt_orient)
    assert result["roe"] == pytest.approx(10.0 * (T - 1) / T)
    assert result["rte"] == pytest.approx(0.0)


def test_root_translation_error_after_first_pose_alignment():
    gt_root = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    pred_root = gt_root @ rot_z(0.3).T + np.array([5.0, -1.0, 0.0])
    pred_orient = np.tile([0.0, 0.0, 0.3], (3, 1))
    result = rte_roe(pred_root, pred_orient, gt_root, np.zeros((3, 3)))
    assert result["rte"] == pytest.approx(0.0, abs=1e-12)
    assert result["roe"] == pytest.approx(0.0, abs=1e-6)


def test_procrustes_recovers_a_similarity(rng):
    A = rng.normal(size=(10, 3))
    R = rotvec_to_matrix(np.array([0.3, -0.2, 0.9]))
    B = 1.7 * A @ R.T + np.array([1.0, 2.0, 3.0])
    fit = procrustes(A, B)
    np.testing.assert_allclose(fit.rotation, R, atol=1e-10)
    assert fit.scale == pytest.approx(1.7)
    np.testing.assert_allclose(fit.apply(A), B, atol=1e-10)
    assert procrustes(A, B, allow_scale=False).scale == 1.0


def test_procrustes_never_returns_a_reflection(rng):
    A = rng.normal(size=(10, 3))
    mirrored = A * np.array([-1.0, 1.0, 1.0])
    fit = procrustes(A, mirrored)
    assert np.linalg.det(fit.rotation) == pytest.approx(1.0)


def test_procrustes_rejects_degenerate_sets():
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateAlignmentError):
        procrustes(line, line)
    with pytest.raises(DegenerateAlignmentError):
        procrustes(np.eye(3)[:2], np.eye(3)[:2])
    with pytest.raises(ShapeError):
        procrustes(np.zeros((4, 3)), np.zeros((5, 3)))


def test_alignment_validation():
    with pytest.raises(DegenerateAlignmentError):
        Alignment("similarity", np.eye(3), np.zeros(3), scale=0.0)
    with pytest.raises(ConfigError):
        Alignment("best_effort", np.eye(3), np.zeros(3))


def test_full_alignment_hides_drift_that_first_frames_expose(joints):
    drift = np.arange(12)[:, None, None] * np.array([0.05, 0.0, 0.0])
    pred = joints + drift
    assert wa_mpjpe(pred, joints) < w_mpjpe(pred, joints)
    assert w_mpjpe(pred, joints) > 0.1


def test_rigidly_moved_prediction_scores_zero_under_every_protocol(joints):
    R = rotvec_to_matrix(np.array([0.0, 0.2, 1.0]))
    pred = joints @ R.T + np.array([3.0, 0.0, -1.0])
    assert w_mpjpe(pred, joints) == pytest.approx(0.0, abs=1e-9)
    assert w_mpjpe(pred, joints, protocol="rich") == pytest.approx(0.0, abs=1e-9)
    assert wa_mpjpe(pred, joints) == pytest.approx(0.0, abs=1e-9)
    assert pa_mpjpe(1.3 * pred, joints) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ConfigError):
        w_mpjpe(pred, joints, protocol="last_frame")


def test_root_error_is_the_root_subset(joints, rng):
    pred = joints + rng.normal(scale=0.05, size=joints.shape)
    assert w_rje(pred, joints) == pytest.approx(w_mpjpe(pred, joints, error_joints=[0]))
    assert w_rje(pred, joints) != pytest.approx(w_mpjpe(pred, joints))


def test_chunk_bounds():
    assert _chunks(201, 100) == [(0, 100), (100, 201)]
    assert _chunks(250, 100) == [(0, 100), (100, 200), (200, 250)]
    assert _chunks(40, 100) == [(0, 40)]
    with pytest.raises(ConfigError):
        _chunks(1, 100)


def test_scale_error():
    assert scale_error(2.2, 2.0) == pytest.approx(0.1)
    assert scale_error(1.0, 1.0) == 0.0


def test_evaluate_solution_against_ground_truth(clean_scenario):
    truth, _ = clean_scenario
    perfect = SimpleNamespace(motion=truth.motion.frames, centers=truth.camera.centers(), scale=truth.scale_true,
                              beta=np.zeros(2))
    report = evaluate_solution(perfect, truth)
    assert {"w_mpjpe", "wa_mpjpe", "pa_mpjpe", "w_rje", "accel", "ate", "ate_s", "cam_accel", "rte", "roe",
            "scale_error"} <= set(report)
    assert report["w_mpjpe"] == pytest.approx(0.0, abs=1e-9)
    assert report["scale_error"] == 0.0
    short = SimpleNamespace(motion=truth.motion.frames[:5], centers=truth.camera.centers()[:5], scale=1.0,
                            beta=np.zeros(2))
    with pytest.raises(ShapeError):
        evaluate_solution(short, truth)


def _random_rigid(rng):
    return rotvec_to_matrix(rng.normal(size=3)), rng.normal(scale=2.0, size=3)


def _drifting_prediction(rng, n_frames=12, n_joints=5):
    body = rng.normal(size=(n_joints, 3))
    path = np.cumsum(rng.normal(scale=0.1, size=(n_frames, 3)), axis=0)
    gt = body[None] + path[:, None]
    R, t = _random_rigid(rng)
    direction = rng.normal(size=3)
    drift = 0.05 * np.arange(n_frames)[:, None] * direction / np.linalg.norm(direction)
    pred = gt @ R.T + t + drift[:, None] + rng.normal(scale=0.01, size=gt.shape)
    return pred, gt


@pytest.mark.parametrize("seed", range(100))
def test_metric_orderings_on_random_motion(seed):
    rng = np.random.default_rng(seed)
    pred, gt = _drifting_prediction(rng)
    assert wa_mpjpe(pred, gt) <= w_mpjpe(pred, gt)
    assert wa_mpjpe(pred, gt) <= w_mpjpe(pred, gt, protocol="rich")
    gt_centers = np.cumsum(rng.normal(size=(20, 3)), axis=0)
    pred_centers = gt_centers + rng.normal(scale=0.3, size=gt_centers.shape)
    assert ate(pred_centers, gt_centers) <= ate(pred_centers, gt_centers, with_scale=False) + 1e-12
    for value in (w_mpjpe(pred, gt), wa_mpjpe(pred, gt), pa_mpjpe(pred, gt), ate(pred_centers, gt_centers)):
        assert value >= 0.0


@pytest.mark.parametrize("seed", range(100))
def test_world_errors_ignore_a_shared_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    pred, gt = _drifting_prediction(rng)
    R, t = _random_rigid(rng)
    moved_pred, moved_gt = pred @ R.T + t, gt @ R.T + t
    assert w_mpjpe(moved_pred, moved_gt) == pytest.approx(w_mpjpe(pred, gt), rel=1e-9, abs=1e-12)
    assert wa_mpjpe(moved_pred, moved_gt) == pytest.approx(wa_mpjpe(pred, gt), rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_similarity_metrics_ignore_the_prediction_scale(seed):
    rng = np.random.default_rng(seed)
    gt_centers = np.cumsum(rng.normal(size=(20, 3)), axis=0)
    pred_centers = gt_centers + rng.normal(scale=0.3, size=gt_centers.shape)
    c = rng.uniform(0.5, 3.0)
    assert ate(c * pred_centers, gt_centers) == pytest.approx(ate(pred_centers, gt_centers), rel=1e-9, abs=1e-12)
    pred, gt = _drifting_prediction(rng)
    R = rotvec_to_matrix(rng.normal(size=(len(pred), 3)))
    scales = rng.uniform(0.5, 3.0, size=len(pred))
    transformed = scales[:, None, None] * np.einsum("fij,fkj->fki", R, pred) + rng.normal(size=(len(pred), 1, 3))
    assert pa_mpjpe(transformed, gt) == pytest.approx(pa_mpjpe(pred, gt), rel=1e-9, abs=1e-12)


def test_rigid_trajectory_error_grows_with_the_prediction_scale(rng):
    gt_centers = np.cumsum(rng.normal(size=(20, 3)), axis=0)
    pred_centers = gt_centers + rng.normal(scale=0.01, size=gt_centers.shape)
    assert ate(2.0 * pred_centers, gt_centers, with_scale=False) > ate(pred_centers, gt_centers, with_scale=False)
