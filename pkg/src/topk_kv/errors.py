"""Exception types shared across the package."""


class TopkKvError(Exception):
    """Base class for all package errors."""


class ShapeError(TopkKvError, ValueError):
    """Operands have incompatible dimensions."""


class DomainError(TopkKvError, ValueError):
    """Input is outside the mathematical domain of the operation."""


class InputError(TopkKvError, ValueError):
    """Malformed caller input (bad token ids, overlapping spans, ...)."""


class ConfigError(TopkKvError, ValueError):
    """Inconsistent run configuration (budget length, meta mismatch, ...)."""


class InfeasibleBudgetError(TopkKvError, ValueError):
    """A budget total cannot satisfy the per-layer minimum."""


class DegenerateError(TopkKvError, ValueError):
    """A statistic is undefined on this input (zero variance, zero baseline)."""


class FormatError(TopkKvError, ValueError):
    """A persisted artifact fails validation.

    Carries the byte offset at which the problem was detected.
    """

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
