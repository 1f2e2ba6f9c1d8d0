"""
Persistence of priors, datasets and run artifacts.

Binary artifacts are zip archives of ``.npy`` members plus a ``meta.json``
member carrying the format version. Members are written in sorted order with
a fixed timestamp, so identical contents give byte-identical files, and the
archives stay readable with ``numpy.load``.
"""

import hashlib
import io
import json
import logging
import zipfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from config.schemas import RunConfig, ScenarioConfig, dump_model
from models.diffusion_prior import GmmPrior, MotionWindow
from utils.errors import StorageError
from utils.geometry import Intrinsics
from utils.synthetic_world import BodyModel, CameraTrajectory, GroundTruth, ObservationSet, Scene

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
ZIP_TIMESTAMP = (1980, 1, 1, 0, 0, 0)
META_MEMBER = "meta.json"

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# Array archives
# ---------------------------------------------------------------------------

def _npy_bytes(array: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    np.save(buffer, np.ascontiguousarray(array), allow_pickle=False)
    return buffer.getvalue()


def _write_member(archive: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=ZIP_TIMESTAMP)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    archive.writestr(info, data)


def save_arrays(path: PathLike, arrays: Dict[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> Path:
    """Write a deterministic array archive."""
    path = Path(path)
    meta = dict(meta or {})
    meta["format_version"] = FORMAT_VERSION
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(path, "w") as archive:
            for name in sorted(arrays):
                _write_member(archive, f"{name}.npy", _npy_bytes(np.asarray(arrays[name])))
            _write_member(archive, META_MEMBER, json.dumps(meta, sort_keys=True).encode("utf-8"))
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e
    return path


def load_arrays(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read an archive written by ``save_arrays``."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as archive:
            names = archive.namelist()
            if META_MEMBER not in names:
                raise StorageError(f"{path} has no {META_MEMBER} member")
            meta = json.loads(archive.read(META_MEMBER).decode("utf-8"))
            arrays = {name[:-4]: np.load(io.BytesIO(archive.read(name)), allow_pickle=False)
                      for name in names if name.endswith(".npy")}
    except FileNotFoundError as e:
        raise StorageError(f"file not found: {path}") from e
    except (OSError, zipfile.BadZipFile, ValueError) as e:
        raise StorageError(f"cannot read {path}: {e}") from e
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise StorageError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    return arrays, meta


def _expect_kind(meta: Dict[str, Any], kind: str, path: PathLike) -> None:
    if meta.get("kind") != kind:
        raise StorageError(f"{path} holds '{meta.get('kind')}', expected '{kind}'")


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------

def save_prior(prior: GmmPrior, path: PathLike) -> Path:
    """Save a prior as JSON (``.json``, exact float text) or as an array archive."""
    path = Path(path)
    arrays, meta = prior.to_arrays()
    if path.suffix == ".json":
        document = {"format_version": FORMAT_VERSION, "meta": meta,
                    "arrays": {name: {"shape": list(np.shape(a)), "data": [float(v) for v in np.ravel(a)]}
                               for name, a in sorted(arrays.items())}}
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(document, sort_keys=True), encoding="utf-8")
        except OSError as e:
            raise StorageError(f"cannot write {path}: {e}") from e
    else:
        save_arrays(path, arrays, meta)
    logger.info(f"Saved prior with {prior.n_components} components to {path}")
    return path


def load_prior(path: PathLike) -> GmmPrior:
    path = Path(path)
    if path.suffix == ".json":
        try:
            document = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise StorageError(f"prior file not found: {path}") from e
        except (OSError, json.JSONDecodeError) as e:
            raise StorageError(f"cannot read prior {path}: {e}") from e
        if document.get("format_version") != FORMAT_VERSION:
            raise StorageError(f"{path} has an unsupported format version")
        arrays = {name: np.asarray(entry["data"], dtype=float).reshape(entry["shape"])
                  for name, entry in document["arrays"].items()}
        meta = document["meta"]
    else:
        arrays, meta = load_arrays(path)
    _expect_kind(meta, "gmm_prior", path)
    return GmmPrior.from_arrays(arrays, meta)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def _body_meta(body: BodyModel) -> Dict[str, Any]:
    return {"joint_names": list(body.joint_names), "rest_offsets": [list(o) for o in body.rest_offsets],
            "foot_indices": list(body.foot_indices)}


def _body_from_meta(meta: Dict[str, Any]) -> BodyModel:
    return BodyModel(tuple(meta["joint_names"]), tuple(tuple(o) for o in meta["rest_offsets"]),
                     tuple(meta["foot_indices"]))


def save_ground_truth(truth: GroundTruth, path: PathLike) -> Path:
    arrays = {"motion": truth.motion.frames, "contacts": truth.contacts, "cam_rotations": truth.camera.rotations,
              "cam_translations": truth.camera.translations, "intrinsics": truth.camera.intrinsics.to_array(),
              "scene": truth.scene.points}
    meta = {"kind": "ground_truth", "n_joints": truth.motion.n_joints, "scale_true": truth.scale_true,
            "fps": truth.fps, "body": _body_meta(truth.body)}
    return save_arrays(path, arrays, meta)


def load_ground_truth(path: PathLike) -> GroundTruth:
    arrays, meta = load_arrays(path)
    _expect_kind(meta, "ground_truth", path)
    camera = CameraTrajectory(arrays["cam_rotations"], arrays["cam_translations"],
                              Intrinsics.from_array(arrays["intrinsics"]))
    return GroundTruth(MotionWindow(arrays["motion"], int(meta["n_joints"])), arrays["contacts"], camera,
                       Scene(arrays["scene"]), _body_from_meta(meta["body"]), float(meta["scale_true"]),
                       float(meta["fps"]))


def save_observations(obs: ObservationSet, path: PathLike) -> Path:
    arrays = {"kp2d": obs.kp2d, "confidence": obs.confidence, "local3d": obs.local3d, "root_cam": obs.root_cam,
              "root_orient_cam": obs.root_orient_cam, "cam_rotations": obs.cam_est.rotations,
              "cam_translations": obs.cam_est.translations, "intrinsics": obs.cam_est.intrinsics.to_array(),
              "first_rotation": obs.first_rotation, "scene_est": obs.scene_est.points,
              "occluded": obs.occluded.astype(np.uint8)}
    return save_arrays(path, arrays, {"kind": "observations", "fps": obs.fps})


def load_observations(path: PathLike) -> ObservationSet:
    arrays, meta = load_arrays(path)
    _expect_kind(meta, "observations", path)
    camera = CameraTrajectory(arrays["cam_rotations"], arrays["cam_translations"],
                              Intrinsics.from_array(arrays["intrinsics"]))
    return ObservationSet(arrays["kp2d"], arrays["confidence"], arrays["local3d"], arrays["root_cam"],
                          arrays["root_orient_cam"], camera, arrays["first_rotation"], Scene(arrays["scene_est"]),
                          arrays["occluded"].astype(bool), float(meta["fps"]))


def dataset_paths(directory: PathLike) -> Dict[str, Path]:
    """File names of a generated dataset directory."""
    directory = Path(directory)
    return {"ground_truth": directory / "ground_truth.npz", "observations": directory / "observations.npz",
            "scenario": directory / "scenario.json"}


def save_dataset(directory: PathLike, config: ScenarioConfig, truth: GroundTruth, obs: ObservationSet) -> Dict[str, Path]:
    paths = dataset_paths(directory)
    save_ground_truth(truth, paths["ground_truth"])
    save_observations(obs, paths["observations"])
    write_text(paths["scenario"], dump_model(config))
    return paths


def load_dataset(directory: PathLike) -> Tuple[GroundTruth, ObservationSet]:
    paths = dataset_paths(directory)
    return load_ground_truth(paths["ground_truth"]), load_observations(paths["observations"])


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def write_text(path: PathLike, text: str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e
    return path


def config_hash(run: RunConfig) -> str:
    """First 8 hex digits of the SHA-256 of the canonical run config."""
    return hashlib.sha256(dump_model(run).encode("utf-8")).hexdigest()[:8]


def run_dir_name(run: RunConfig, scenario_name: str) -> str:
    return f"{scenario_name}-{config_hash(run)}-seed{run.seed}"


def write_trace(rows: List[Dict[str, Any]], path: PathLike) -> Path:
    """Loss trace as CSV."""
    path = Path(path)
    frame = pd.DataFrame(rows)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format="%.10g")
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e
    return path


def read_trace(path: PathLike) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except FileNotFoundError as e:
        raise StorageError(f"trace not found: {path}") from e


def save_solution(solution, directory: PathLike) -> Dict[str, Path]:
    """Write the per-window variables and the merged trajectory of a run."""
    directory = Path(directory)
    variables = {f"w{i:03d}_{name}": value for i, window in enumerate(solution.windows)
                 for name, value in window.variables.items()}
    spans = np.array([window.span for window in solution.windows], dtype=np.int64).reshape(-1, 2)
    variables["spans"] = spans
    trajectory = {"motion": solution.motion, "cam_rotations": solution.rotations, "cam_centers": solution.centers,
                  "cam_translations": solution.translations, "beta": solution.beta,
                  "scale": np.array(solution.scale)}
    return {
        "variables": save_arrays(directory / "variables.npz", variables, {"kind": "variables",
                                                                         "n_windows": len(solution.windows)}),
        "trajectory": save_arrays(directory / "trajectory.npz", trajectory, {"kind": "trajectory",
                                                                            "method": solution.method}),
    }


def load_trajectory(path: PathLike) -> Dict[str, Any]:
    arrays, meta = load_arrays(path)
    _expect_kind(meta, "trajectory", path)
    arrays["scale"] = float(arrays["scale"])
    arrays["method"] = meta["method"]
    return arrays


def write_metrics(report: Dict[str, float], directory: PathLike) -> Dict[str, Path]:
    directory = Path(directory)
    csv_path = directory / "metrics.csv"
    json_path = directory / "metrics.json"
    try:
        directory.mkdir(parents=True, exist_ok=True)
        pd.DataFrame([report]).to_csv(csv_path, index=False, float_format="%.10g")
    except OSError as e:
        raise StorageError(f"cannot write {csv_path}: {e}") from e
    write_text(json_path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    return {"csv": csv_path, "json": json_path}
