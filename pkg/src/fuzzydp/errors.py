"""Exception hierarchy shared by every module."""


class FuzzyDPError(Exception):
    """Base class for all package errors."""


class DensityOutOfRange(FuzzyDPError, ValueError):
    pass


class NoConvergence(FuzzyDPError, RuntimeError):
    pass


class InvalidSubset(FuzzyDPError, ValueError):
    pass


class NotConvex(FuzzyDPError, ValueError):
    pass


class TooLarge(FuzzyDPError, ValueError):
    pass


class LengthMismatch(FuzzyDPError, ValueError):
    pass


class DimensionMismatch(FuzzyDPError, ValueError):
    pass


class ShapeMismatch(FuzzyDPError, ValueError):
    pass


class ActionOutOfRange(FuzzyDPError, ValueError):
    pass


class InvalidGrid(FuzzyDPError, ValueError):
    pass


class ParseError(FuzzyDPError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvariantViolation(FuzzyDPError, ValueError):
    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class NonFinite(FuzzyDPError, FloatingPointError):
    pass


class NonFiniteGradient(NonFinite):
    pass


class ConditionsUnmet(FuzzyDPError):
    def __init__(self, conditions, report=None):
        self.conditions = list(conditions)
        self.report = report
        super().__init__("equivalence conditions unmet: " + ", ".join(self.conditions))
