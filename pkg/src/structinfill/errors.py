"""Exception hierarchy shared by every module in the package."""


class InfillError(Exception):
    """Base class for all errors raised by structinfill."""


class RangeError(InfillError, ValueError):
    """A token payload or note field lies outside its vocabulary range."""


class CapacityError(InfillError, ValueError):
    """A fixed-size resource (bar numbers, struct ids, positions) is exhausted."""


class GrammarError(InfillError, ValueError):
    def __init__(self, message: str, index: int | None = None):
        self.index = index
        if index is not None:
            message = f"{message} (token index {index})"
        super().__init__(message)


class ConfigError(InfillError, ValueError):
    """Invalid configuration value."""


class ParseError(InfillError, ValueError):
    def __init__(self, message: str, index: int | None = None):
        self.index = index
        if index is not None:
            message = f"{message} (word index {index})"
        super().__init__(message)


class CoverageError(InfillError, ValueError):
    """Something that must be mapped or present is missing."""


class IoError(InfillError, OSError):
    """File could not be read or written."""


class MissingTrackError(InfillError, ValueError):
    """MIDI file holds none of the expected melody tracks."""


class MaskError(InfillError, ValueError):
    """Loss mask selects no positions."""


class DistributionError(InfillError, ValueError):
    """Probability vector is not a valid distribution."""


class EmptySegmentError(InfillError, ValueError):
    """Metric asked to work on a segment with no notes or no bars."""


class AlignmentError(InfillError, ValueError):
    """Parallel lists have different lengths."""


class StructureIndexError(InfillError, IndexError):
    """A structure index refers to a context that does not exist."""


class TrainingDivergedError(InfillError, RuntimeError):
    def __init__(self, step: int, batch_ids: list[int], loss: float):
        self.step = step
        self.batch_ids = batch_ids
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at step {step}, batch {batch_ids}")
