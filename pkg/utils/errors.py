"""
Error types shared by the motion/camera estimation pipeline.

Every failure raised by the library derives from CoinError so the CLI and the
HTTP service can translate it into an exit code or a status code.
"""

from typing import Any, Dict, List, Optional


class CoinError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(CoinError, ValueError):
    """Invalid configuration, parameters or dataset sizes."""


class DomainError(CoinError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ShapeError(CoinError, ValueError):
    """Array dimensions do not match."""


class OrderingError(CoinError, ValueError):
    """Diffusion times passed in the wrong order."""


class BehindCameraError(CoinError, ValueError):
    """A point projects behind the camera."""


class DegenerateAlignmentError(CoinError, ValueError):
    """Point sets are collinear or coincident."""


class StorageError(CoinError, OSError):
    """Unreadable, unwritable or incompatible artifact."""


class NumericalError(CoinError, ArithmeticError):
    """
    Non-finite intermediate value or singular weight.

    Args:
        message: Human readable description
        step: Index of the iteration or denoising step that failed
        trace: Loss rows recorded before the failure
    """

    def __init__(self, message: str, step: Optional[int] = None,
                 trace: Optional[List[Dict[str, Any]]] = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step
        self.trace = trace or []


# CLI exit codes
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code."""
    if isinstance(error, (ConfigError, DomainError, ShapeError, OrderingError)):
        return EXIT_CONFIG
    if isinstance(error, NumericalError):
        return EXIT_NUMERIC
    if isinstance(error, (StorageError, OSError)):
        return EXIT_IO
    return EXIT_FAILURE
