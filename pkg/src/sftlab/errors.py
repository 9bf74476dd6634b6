class ConfigError(ValueError):
    """Invalid configuration value or plan."""


class InfeasibleAlignmentError(ValueError):
    """The target cannot be aligned to the given number of frames."""


class VocabularyError(ValueError):
    pass


class InputLengthError(ValueError):
    pass


class ClassificationError(KeyError):
    """A parameter path matched no functional module."""


class CheckpointError(ValueError):
    pass


class DigestMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class SelectionError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, path: str, index: int, value: float):
        super().__init__(f"non-finite gradient {value} at {path}[{index}]")
        self.path = path
        self.index = index


class DivergenceError(RuntimeError):
    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class DisjointnessError(ValueError):
    pass
