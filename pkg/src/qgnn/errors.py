"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class IndexRangeError(IndexError):
    """An index vector refers to rows outside the target tensor."""


class ContractError(RuntimeError):
    """An operation was called in a state its contract forbids."""


class ConfigError(ValueError):
    """A configuration value is outside its legal range."""


class ParseError(ValueError):
    """A data file could not be parsed; carries the offending line number."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"{message} (line {line_no})"
        super().__init__(message)
        self.line_no = line_no


class TrainDiverged(RuntimeError):
    """Training hit a non-finite value; records where and when."""

    def __init__(self, epoch, site):
        super().__init__(f"non-finite value at epoch {epoch} in {site}")
        self.epoch = epoch
        self.site = site


class LowerError(RuntimeError):
    """A checkpoint cannot be lowered to the integer runtime."""
