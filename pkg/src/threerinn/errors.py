"""Exception types shared across the package.

The CLI maps each family to a fixed exit code (see ``threerinn.cli``).
"""


class ConfigError(ValueError):
    """Malformed key=value configuration (carries the offending line number)."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class ShapeError(ValueError):
    """Tensor or image dimensions violate an operation's precondition."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared where a finite value is required."""


class FormatError(ValueError):
    """Corrupt or unsupported binary file (checkpoint, latent, PNG)."""
