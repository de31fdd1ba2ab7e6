"""Exception hierarchy shared across modules."""


class CanForestError(Exception):
    """Base class for every error raised by this package."""


class EmptyInputError(CanForestError, ValueError):
    pass


class InvalidInputError(CanForestError, ValueError):
    pass


class ParseError(CanForestError, ValueError):
    """Malformed line in a CAN log; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class StratificationError(CanForestError, ValueError):
    pass


class TrainingError(CanForestError, ValueError):
    pass


class AggregationError(CanForestError, ValueError):
    pass


class ClassMismatchError(CanForestError, ValueError):
    pass


class SampleSizeError(CanForestError, ValueError):
    pass


class AttackError(CanForestError, ValueError):
    pass


class TamperError(CanForestError):
    """Stored bytes no longer hash to the digest they were filed under."""


class ChainError(CanForestError):
    """Hash chain failed verification; `index` is the first bad block."""

    def __init__(self, index: int, message: str):
        super().__init__(f"block {index}: {message}")
        self.index = index


class CaptureRefused(CanForestError):
    pass


class EmptyAugmentationError(CanForestError, ValueError):
    pass


class ConfigError(CanForestError, ValueError):
    """Config validation failure listing every violation found."""

    def __init__(self, violations: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(violations))
        self.violations = list(violations)
