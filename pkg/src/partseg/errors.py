"""Exception types shared across the package.

The CLI maps these onto its exit codes, so each class carries the code it
should surface as.
"""


class PartSegError(Exception):
    exit_code = 2


class InputShapeError(PartSegError, ValueError):
    pass


class TimestepError(PartSegError, ValueError):
    pass


class ConfigurationError(PartSegError, ValueError):
    pass


class ClassCountError(PartSegError, ValueError):
    pass


class AggregationError(PartSegError, ValueError):
    pass


class LabelRangeError(PartSegError, ValueError):
    pass


class DivergenceError(PartSegError, RuntimeError):
    exit_code = 3

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}


class CompatibilityError(PartSegError):
    exit_code = 4


class CheckpointError(PartSegError, ValueError):
    pass


class FormatError(PartSegError, ValueError):
    pass


class IngestionError(PartSegError, FileNotFoundError):
    pass


class SplitError(PartSegError, ValueError):
    pass


class EvalError(PartSegError, ValueError):
    pass


class EmissionError(PartSegError, ValueError):
    pass
