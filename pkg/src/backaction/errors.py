"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain where an operation is defined."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed or out of range.

    Carries the dotted key path and a unit hint so the CLI can point the user
    at the offending entry.
    """

    def __init__(self, key: str, message: str, unit: str | None = None):
        self.key = key
        self.unit = unit
        hint = f" [expected unit: {unit}]" if unit else ""
        super().__init__(f"{key}: {message}{hint}")


class UnitError(ValueError):
    """Blocks were chained whose input/output units do not line up."""


class SingularLoopError(ArithmeticError):
    """The closed-loop denominator is (numerically) zero."""


class AssumptionError(ValueError):
    """A modelling assumption required by a readout formula is violated."""


class CalibrationError(ValueError):
    """A transfer function vanishes on bins that need to be calibrated."""

    def __init__(self, bins, message: str = "transfer magnitude below tolerance"):
        self.bins = list(bins)
        shown = ", ".join(f"{b:g}" for b in self.bins[:10])
        more = "" if len(self.bins) <= 10 else f" (+{len(self.bins) - 10} more)"
        super().__init__(f"{message} at {shown}{more} Hz")


class InsufficientDataError(ValueError):
    """Too few samples for a statistical test."""


class NoResonanceError(ValueError):
    """No resonance peak could be located in a sweep trace."""
