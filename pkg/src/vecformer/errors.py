"""Exception types shared across the package."""


class VecFormerError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(VecFormerError, ValueError):
    pass


class DomainError(VecFormerError, ValueError):
    pass


class ContractError(VecFormerError, ValueError):
    pass


class NumericError(VecFormerError, ArithmeticError):
    pass


class ConfigError(VecFormerError, ValueError):
    pass


class FormatError(VecFormerError, ValueError):
    """Malformed on-disk data. ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class StructuralError(FormatError):
    """Index out of range or otherwise inconsistent graph topology."""


class UndefinedMetricError(VecFormerError, ValueError):
    pass


class TrainingError(VecFormerError, RuntimeError):
    pass


class CheckpointError(VecFormerError, ValueError):
    pass
