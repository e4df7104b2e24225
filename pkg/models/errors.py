"""Exception hierarchy shared by every model module."""


class UwocError(Exception):
    """Base class for all simulator errors."""


class ParameterError(UwocError, ValueError):
    """A numeric parameter is out of range or inconsistent."""


class InfeasibleError(UwocError):
    """The requested plan cannot be realised.

    Args:
        message (str): Human readable description.
        ring (int | None): Offending ring index for power allocation failures.
    """

    def __init__(self, message, ring=None):
        super().__init__(message)
        self.ring = ring


class GeometryError(UwocError, ValueError):
    """Anchor layout is degenerate (collinear or singular normal matrix)."""


class ConditioningError(UwocError, ValueError):
    """Least-squares design matrix is rank deficient."""


class DegenerateResponseError(UwocError, ValueError):
    """Impulse response carries no energy to fit."""


class AmbiguousPositionError(UwocError):
    """TDOA solve did not converge to a unique position.

    Args:
        message (str): Human readable description.
        candidates (list): Candidate (x, y) solutions found by the multi-start search.
    """

    def __init__(self, message, candidates=None):
        super().__init__(message)
        self.candidates = list(candidates or [])


class OutOfCellError(UwocError, ValueError):
    """Distance lies beyond the cell radius."""


class UndefinedBearingError(UwocError, ValueError):
    """Mobile user coincides with its base station."""


class UnknownMobileUserError(UwocError, LookupError):
    """No location is known for the mobile user."""


class ScenarioValidationError(UwocError):
    """Scenario failed cross-constraint validation.

    Args:
        diagnostics (list[dict]): One entry per violated constraint.
    """

    def __init__(self, diagnostics):
        super().__init__("; ".join(d["message"] for d in diagnostics))
        self.diagnostics = list(diagnostics)
