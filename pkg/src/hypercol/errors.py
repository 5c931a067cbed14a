"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An operand shape violates an operation's contract."""


class AutogradError(RuntimeError):
    """Tape/backward misuse, e.g. a loss that is not a recorded scalar."""


class GradCheckError(AssertionError):
    """A finite-difference check exceeded its tolerance."""


class DataError(ValueError):
    """Dataset, manifest, or image-format problem."""


class ConfigError(ValueError):
    """Run-configuration parse or validation failure."""


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed, truncated, or incompatible."""


class TrainingError(RuntimeError):
    """Training aborted, e.g. on a non-finite loss or gradient."""
