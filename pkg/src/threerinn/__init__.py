"""Invertible image rescaling with grain removal and display-energy reduction."""

__version__ = "0.1.0"

from .errors import ConfigError, FormatError, NonFiniteError, ShapeError  # noqa: E402
from .network import ThreeRINN, load_checkpoint, save_checkpoint  # noqa: E402

__all__ = [
    "ConfigError",
    "FormatError",
    "NonFiniteError",
    "ShapeError",
    "ThreeRINN",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]
