"""Desk-scale multimodal video diffusion: decoupled text/image cross-attention,
appended temporal attention, masked first-frame conditioning and residual
geometry control, trained on synthetic moving-shape latents."""

__version__ = "0.1.0"


class ShapeError(ValueError):
    """Tensor shapes are inconsistent with an operation's contract."""


class ConfigError(ValueError):
    """Invalid model, schedule or run configuration."""


class InputError(ValueError):
    """Invalid user-supplied input (token ids, timesteps, frame masks...)."""


class FormatError(ValueError):
    """Malformed checkpoint or clip file."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
