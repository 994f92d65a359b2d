"""Exception types shared across the package."""


class CastError(Exception):
    """Base class for all package errors."""


# --- cohort ---------------------------------------------------------------

class MissingColumn(CastError):
    """A column required by the schema is absent from the CSV header."""


class ParseError(CastError):
    """A cell could not be parsed as the declared column kind."""


class TooFewEvents(CastError):
    """Stratified splitting is infeasible with fewer than 4 events."""


# --- survival -------------------------------------------------------------

class EmptyInput(CastError):
    """An estimator received no observations."""


class NonSurvivalCurve(CastError):
    """A step function that is not a survival curve where one is required."""


class EmptyGroup(CastError):
    """A conditioning group (e.g. treatment arm) contains no subjects."""


# --- propensity -----------------------------------------------------------

class SingleClass(CastError):
    """All subjects share one treatment value; a propensity fit is undefined."""


class NonConvergence(CastError):
    """Coordinate descent hit the sweep limit; carries the final gap."""

    def __init__(self, message: str, gap: float):
        super().__init__(message)
        self.gap = gap


class DimensionMismatch(CastError):
    """Covariate dimension differs between model and data."""


class EmptyAfterTrim(CastError):
    """Overlap trimming removed every subject."""


# --- forest ---------------------------------------------------------------

class NoValidSubjects(CastError):
    """No subject has a usable pseudo-outcome at this horizon."""


class DegenerateArm(CastError):
    """A treatment arm has too few observable subjects for nuisance fits."""


class TooSmall(CastError):
    """Not enough samples to grow honest trees at the configured node size."""


# --- trajectory -----------------------------------------------------------

class SingularDesign(CastError):
    """The weighted quadratic design matrix is singular (duplicate horizons)."""


class TooFewPoints(CastError):
    """Fewer distinct horizons than the fit requires."""


# --- heterogeneity --------------------------------------------------------

class NonFiniteModelOutput(CastError):
    """The black-box model returned NaN or infinity."""


# --- refutation -----------------------------------------------------------

class CorrelationUnachievable(CastError):
    """The target covariate/treatment correlation cannot be constructed."""


# --- synth ----------------------------------------------------------------

class InfeasibleEffect(CastError):
    """The requested effect trajectory pushes survival outside [0, 1]."""


class NonPositiveDose(CastError):
    """Dose inputs to the biologically-effective-dose formula must be positive."""
