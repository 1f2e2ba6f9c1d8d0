"""
Runtime Configuration for the COIN motion/camera estimator

This module reads environment-level settings (output locations, logging,
threading) and defines the estimation methods the pipeline can run.
"""

import os
from enum import Enum
from typing import Any, Dict


class Method(Enum):
    COIN = "coin"
    VANILLA_SDS = "vanilla_sds"
    NOISE_OPT = "noise_opt"
    GUIDED = "guided"
    INIT_ONLY = "init_only"

    def describe(self) -> str:
        """Get human-readable method information."""
        names = {
            Method.COIN: "COIN-SDS (controlled sampling + soft inpainting)",
            Method.VANILLA_SDS: "Vanilla SDS (single-step unconditional target)",
            Method.NOISE_OPT: "Noise optimization (latent through DDIM chain)",
            Method.GUIDED: "Guided sampling (objective gradients during DDIM)",
            Method.INIT_ONLY: "Initialization only (controlled prior draw)",
        }
        return names.get(self, "Unknown")


# Per-channel observation noise of the control signal, in world units.
DEFAULT_OBS_NOISE = {
    'translation': 0.1,
    'orientation': 0.05,
    'pose': 0.01,
    'contact': 1.0,
}

DEFAULT_FRAME_INTERVAL = 1.0 / 30.0


def _env_flag(name: str, default: str = 'false') -> bool:
    return os.getenv(name, default).strip().lower() in ('1', 'true', 'yes', 'on')


class Settings:
    """Environment-driven settings shared by the CLI and the HTTP service."""

    def __init__(self):
        self.config = self._load_config()

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from the environment."""
        return {
            'output_root': os.getenv('COIN_OUTPUT_ROOT', './runs'),
            'log_level': os.getenv('COIN_LOG_LEVEL', 'INFO').upper(),
            'progress': _env_flag('COIN_PROGRESS'),
            'torch_threads': int(os.getenv('COIN_TORCH_THREADS', '1')),
            'max_workers': int(os.getenv('COIN_MAX_WORKERS', '1')),
            'default_prior': os.getenv('COIN_DEFAULT_PRIOR', ''),
        }

    def reload(self) -> None:
        """Re-read the environment (used after load_dotenv in entry points)."""
        self.config = self._load_config()

    @property
    def output_root(self) -> str:
        return self.config['output_root']

    @property
    def log_level(self) -> str:
        return self.config['log_level']

    @property
    def progress(self) -> bool:
        return self.config['progress']

    @property
    def torch_threads(self) -> int:
        return self.config['torch_threads']

    @property
    def max_workers(self) -> int:
        return self.config['max_workers']

    @property
    def default_prior(self) -> str:
        return self.config['default_prior']

    def get_info(self) -> Dict[str, Any]:
        """Get a serializable view of the active settings."""
        return dict(self.config)


# Global settings instance
settings = Settings()
