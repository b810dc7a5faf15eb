"""Exception types shared across the package."""


class PitaError(Exception):
    """Base class for all errors raised by this package."""


class TrajectoryFormatError(PitaError):
    """A ``.pita`` file could not be decoded."""


class BadMagic(TrajectoryFormatError):
    pass


class Truncated(TrajectoryFormatError):
    pass


class VersionMismatch(TrajectoryFormatError):
    pass


class TrajectoryIOError(PitaError, OSError):
    """I/O failure while reading or writing a file; carries the path."""

    def __init__(self, path, cause):
        self.path = str(path)
        self.cause = cause
        super().__init__(f"{self.path}: {cause}")


class ShapeError(PitaError, ValueError):
    pass


class InsufficientFrames(PitaError, ValueError):
    pass


class UnsupportedOrder(PitaError, ValueError):
    pass


class EmptyLibrary(PitaError, ValueError):
    pass


class UnstableTimestep(PitaError, ValueError):
    pass


class NonFinite(PitaError, ArithmeticError):
    def __init__(self, message, frame=None):
        self.frame = frame
        super().__init__(message)


class SampleError(PitaError):
    """A batch member failed; ``index`` identifies which one."""

    def __init__(self, index, cause):
        self.index = index
        self.cause = cause
        super().__init__(f"sample {index}: {cause}")


class ZeroNormFrame(PitaError, ArithmeticError):
    pass


class DomainError(PitaError, ValueError):
    pass


class NonScalarRoot(PitaError, ValueError):
    pass


class TapeConsumed(PitaError, RuntimeError):
    pass


class TrainingError(PitaError):
    """Wraps a failure inside the training loop with (epoch, batch) context."""

    def __init__(self, epoch, batch, cause):
        self.epoch = epoch
        self.batch = batch
        self.cause = cause
        super().__init__(f"epoch {epoch}, batch {batch}: {cause}")
