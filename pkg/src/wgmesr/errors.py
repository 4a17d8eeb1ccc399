class UnfittableError(ValueError):
    """The data carry no information about the model (flat trace, rank-deficient Jacobian)."""


class DegenerateFitError(UnfittableError):
    """An avoided-crossing fit whose data never approach the crossing."""


class DataError(ValueError):
    """Malformed or missing input files."""


class TrackingWarning(UserWarning):
    """Adiabatic or mode tracking was ambiguous somewhere in the sweep."""
