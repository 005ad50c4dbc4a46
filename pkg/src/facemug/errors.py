"""Exception types shared across the package.

Every error raised on a contract violation derives from FacemugError so
callers (CLI, service) can map them to exit codes / HTTP statuses in one
place.
"""


class FacemugError(Exception):
    pass


class ShapeError(FacemugError):
    """Tensor shape or resolution does not match the contract."""


class InvalidInputError(FacemugError):
    """Non-finite values, out-of-range scalars, malformed payloads."""


class InvalidMaskError(InvalidInputError):
    """Mask is empty, not binary, or does not match the image resolution."""


class MissingDirectionError(FacemugError):
    """Requested named attribute direction is not in the registry."""


class DegenerateDirectionError(FacemugError):
    """Attribute direction has (near-)zero norm and cannot be normalized."""


class DegenerateEmbeddingError(FacemugError):
    """Text/image embedding difference has near-zero norm; the directional
    loss is undefined for this pair."""


class TrainingDivergedError(FacemugError):
    """A loss became non-finite; carries the offending step index."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class CheckpointError(FacemugError):
    pass


class CheckpointIntegrityError(CheckpointError):
    """Checksum mismatch or truncated container."""


class CheckpointVersionError(CheckpointError):
    """Container format version not supported by this build."""


class CheckpointConfigMismatchError(CheckpointError):
    """Stored config hash differs from the active config."""
