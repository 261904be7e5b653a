"""Exception types shared across the package."""


class MaskMergeError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(MaskMergeError, ValueError):
    """Operand dimensions are incompatible."""


class DomainError(MaskMergeError, ValueError):
    """An input lies outside an operation's mathematical domain."""


class ContractError(MaskMergeError, ValueError):
    """A caller violated an API precondition (layout, tape, or spec mismatch)."""


class DegenerateMaskError(MaskMergeError, ValueError):
    """A mask collapsed to (near) all zeros, so rescaling is undefined."""


class CorruptCheckpointError(MaskMergeError, ValueError):
    """A checkpoint file failed magic, version, manifest, or CRC validation."""


class PipelineError(MaskMergeError, RuntimeError):
    """A pipeline stage failed; the message names the stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage
