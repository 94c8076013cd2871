"""Exception hierarchy shared by every mmsr module."""


class MMSRError(Exception):
    """Base class for all mmsr errors."""


class ShapeError(MMSRError, ValueError):
    pass


class ParameterError(MMSRError, ValueError):
    pass


class FormatError(MMSRError, ValueError):
    pass


class ParseError(MMSRError, ValueError):
    pass


class SegmentationError(MMSRError, RuntimeError):
    pass


class NormalizationError(MMSRError, ValueError):
    pass


class SamplingError(MMSRError, RuntimeError):
    pass


class CheckpointError(MMSRError, RuntimeError):
    pass


class ConfigError(MMSRError, ValueError):
    pass


class TrainingDivergedError(MMSRError, RuntimeError):
    """Raised when a loss term becomes NaN or infinite.

    ``term`` names the offending component so the log points at the bug.
    """

    def __init__(self, term: str, value: float, iteration: int):
        self.term = term
        self.value = value
        self.iteration = iteration
        super().__init__(f"non-finite loss term {term!r} = {value} at iteration {iteration}")
