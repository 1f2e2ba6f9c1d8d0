"""
Structured configuration models for scenarios and runs.

Scenario files and run files are human-readable JSON validated with pydantic;
the HTTP service reuses the same models as request bodies.
"""

import json
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Type, TypeVar, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from config.settings import DEFAULT_OBS_NOISE, Method
from utils.errors import ConfigError, StorageError

ModelT = TypeVar("ModelT", bound=BaseModel)


class Ablation(str, Enum):
    NO_CONTROL = "no_control"
    NO_DYNAMIC_CONTROL = "no_dynamic_control"
    NO_SOFT_INPAINT = "no_soft_inpaint"
    NO_HSR = "no_hsr"


LOSS_TERMS = ("l_2d", "l_3d", "l_beta", "l_smooth", "l_contact", "l_hsr", "l_coin_sds")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GaitParams(_Strict):
    """Procedural locomotion parameters (metres, seconds, radians)."""
    speed: float = Field(1.2, ge=0.0)
    turn_rate: float = 0.0
    heading: float = Field(0.0, ge=-3.141592653589793, le=3.141592653589793)
    stride_period: float = 1.0
    stance_fraction: float = Field(0.6, gt=0.0, lt=1.0)
    step_height: float = Field(0.08, ge=0.0)
    foot_width: float = Field(0.1, ge=0.0)
    hip_height: float = Field(0.9, gt=0.0)
    bob_amplitude: float = Field(0.02, ge=0.0)
    contact_speed: float = Field(0.02, gt=0.0)


class CameraRigConfig(_Strict):
    style: Literal["orbit", "follow", "handheld"] = "orbit"
    radius: float = Field(4.0, gt=0.0)
    height: float = Field(1.6, gt=0.0)
    orbit_rate: float = 0.3
    side_angle: float = 0.5
    jitter_rotation: float = Field(0.01, ge=0.0)
    jitter_position: float = Field(0.03, ge=0.0)
    knot_spacing: int = Field(8, ge=2)
    focal: float = Field(1000.0, gt=0.0)
    image_size: int = Field(1000, gt=0)


class NoiseConfig(_Strict):
    """Observation noise and occlusion model of the simulator."""
    pixel_sigma: float = Field(2.0, ge=0.0)
    outlier_prob: float = Field(0.02, ge=0.0, le=1.0)
    outlier_pixels: float = Field(40.0, ge=0.0)
    translation: float = Field(DEFAULT_OBS_NOISE['translation'], ge=0.0)
    orientation: float = Field(DEFAULT_OBS_NOISE['orientation'], ge=0.0)
    pose: float = Field(DEFAULT_OBS_NOISE['pose'], ge=0.0)
    lower_body_prob: float = Field(0.2, ge=0.0, le=1.0)
    full_pose_prob: float = Field(0.2, ge=0.0, le=1.0)
    joint_prob: float = Field(0.3, ge=0.0, le=1.0)
    joint_event_prob: float = Field(0.5, ge=0.0, le=1.0)
    occlusion_block: int = Field(16, ge=1)
    drift_sigma: float = Field(0.002, ge=0.0)
    rotation_jitter: float = Field(0.002, ge=0.0)
    gravity_sigma: float = Field(0.01, ge=0.0)
    scene_sigma: float = Field(0.01, ge=0.0)

    @classmethod
    def zero(cls) -> "NoiseConfig":
        """Noiseless, occlusion-free channel."""
        return cls(**{name: 0.0 for name, info in cls.model_fields.items() if info.annotation is float})


class SceneConfig(_Strict):
    n_points: int = Field(1500, ge=1)
    margin: float = Field(3.0, gt=0.0)
    wall_height: float = Field(3.0, gt=0.0)


class ScenarioConfig(_Strict):
    name: str = "scenario"
    n_frames: int = Field(128, ge=2)
    fps: float = Field(30.0, gt=0.0)
    seed: int = 0
    scale_true: float = Field(1.0, gt=0.0)
    gait: GaitParams = GaitParams()
    camera: CameraRigConfig = CameraRigConfig()
    noise: NoiseConfig = NoiseConfig()
    scene: SceneConfig = SceneConfig()


class LossWeights(_Strict):
    l_2d: float = Field(1.0, ge=0.0)
    l_3d: float = Field(1.0, ge=0.0)
    l_beta: float = Field(0.01, ge=0.0)
    l_smooth: float = Field(0.1, ge=0.0)
    l_contact: float = Field(0.1, ge=0.0)
    l_hsr: float = Field(1.0, ge=0.0)
    l_coin_sds: float = Field(0.5, ge=0.0)

    def without(self, terms) -> "LossWeights":
        return self.model_copy(update={term: 0.0 for term in terms})

    def as_dict(self) -> Dict[str, float]:
        return {term: float(getattr(self, term)) for term in LOSS_TERMS}


class OptimConfig(_Strict):
    stage_steps: Tuple[int, int, int] = (500, 500, 500)
    stage_lrs: Tuple[float, float, float] = (0.01, 0.01, 0.001)
    window_frames: int = Field(128, ge=3)
    overlap: int = Field(16, ge=0)
    mask_threshold: float = Field(0.3, gt=0.0, lt=1.0)
    parallel: bool = False
    huber_delta: float = Field(10.0, gt=0.0)

    @model_validator(mode="after")
    def _check_overlap(self):
        if self.overlap >= self.window_frames:
            raise ValueError("overlap must be smaller than the window length")
        if any(step < 0 for step in self.stage_steps):
            raise ValueError("stage step counts must be non-negative")
        return self


class SdsSettings(_Strict):
    n_ddim_steps: int = Field(10, ge=1)
    omega: float = Field(1.0, gt=0.0)
    t_min: float = Field(0.02, gt=0.0, le=1.0)
    t_max: float = Field(0.98, gt=0.0, le=1.0)
    anneal: bool = False
    inpaint_mode: Literal["soft", "hard", "off"] = "soft"
    camera_coupling: bool = False

    @model_validator(mode="after")
    def _check_range(self):
        if self.t_min > self.t_max:
            raise ValueError("t_min must not exceed t_max")
        return self


class RunConfig(_Strict):
    """One optimization run: inputs, method, ablations and seeds."""
    scenario: Optional[str] = None
    dataset: Optional[str] = None
    prior: Optional[str] = None
    method: Method = Method.COIN
    ablations: List[Ablation] = []
    drop_terms: List[str] = []
    scenario_seed: int = 0
    seed: int = 0
    output_dir: Optional[str] = None
    weights: LossWeights = LossWeights()
    optim: OptimConfig = OptimConfig()
    sds: SdsSettings = SdsSettings()
    init_mode: Literal["exact", "ddpm"] = "exact"
    ddpm_steps: int = Field(100, ge=1)
    guidance_scale: float = Field(0.1, ge=0.0)
    noise_opt_steps: int = Field(10, ge=1)

    @field_validator("drop_terms")
    @classmethod
    def _known_terms(cls, value: List[str]) -> List[str]:
        unknown = sorted(set(value) - set(LOSS_TERMS))
        if unknown:
            raise ValueError(f"unknown loss terms: {unknown}")
        return value

    @model_validator(mode="after")
    def _ablations_need_coin(self):
        if self.ablations and self.method != Method.COIN:
            raise ValueError(f"ablation flags are only valid with method 'coin', got '{self.method.value}'")
        return self

    def has(self, ablation: Ablation) -> bool:
        return ablation in self.ablations

    def effective_weights(self) -> LossWeights:
        """Loss weights after drop_terms and the no_hsr ablation are applied."""
        dropped = set(self.drop_terms)
        if self.has(Ablation.NO_HSR):
            dropped.add("l_hsr")
        if self.method in (Method.NOISE_OPT, Method.GUIDED, Method.INIT_ONLY):
            dropped.add("l_coin_sds")
        return self.weights.without(sorted(dropped))

    def variant_name(self) -> str:
        if not self.ablations:
            return self.method.value
        return "coin_" + "_".join(sorted(a.value for a in self.ablations))


def parse_model(model_cls: Type[ModelT], data: Union[Dict[str, Any], ModelT]) -> ModelT:
    """Validate a dict into a model, raising ConfigError on failure."""
    if isinstance(data, model_cls):
        return data
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid {model_cls.__name__}: {e}") from e


def load_model(model_cls: Type[ModelT], path: Union[str, Path]) -> ModelT:
    """Read a JSON config file into a validated model."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise StorageError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    return parse_model(model_cls, data)


def dump_model(model: BaseModel) -> str:
    """Canonical JSON text of a model (sorted keys, stable across runs)."""
    return json.dumps(model.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
