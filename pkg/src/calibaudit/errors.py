"""Exception hierarchy shared across the toolkit.

Two broad categories matter to callers: input/validation problems
(:class:`ValidationError`) and numerical failures of an optimization
(:class:`SolverError`). The CLI maps them to exit codes 2 and 3.
"""


class CalibAuditError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(CalibAuditError, ValueError):
    """Malformed input: bad shapes, schemas, preconditions."""


class SolverError(CalibAuditError, RuntimeError):
    """Numerical failure inside an optimization."""


# -- geometry / projection ---------------------------------------------------

class NonPositiveDepthError(ValidationError):
    """A point at or behind the camera plane (z <= 0) was projected."""


class NoConvergenceError(SolverError):
    """Iterative distortion inversion exhausted its iteration budget."""


class OutsideInvertibleRegionError(ValidationError):
    """Pixel lies where the radial distortion is non-monotonic."""


# -- least squares -----------------------------------------------------------

class RankDeficientError(SolverError):
    """Normal equations are singular without damping."""


class MaxIterationsError(SolverError):
    """Optimizer hit its iteration budget before converging."""


class NonFiniteResidualError(SolverError):
    """Residual evaluation produced NaN or infinity."""


# -- calibration -------------------------------------------------------------

class DegenerateConfigurationError(ValidationError):
    """Initialization failed: too few frames or near-singular homographies."""


class InsufficientObservationsError(ValidationError):
    """Fewer observations than free parameters (N <= N_P)."""


class TooFewCornersError(ValidationError):
    """A pose refit needs at least 4 observed corners."""


# -- audits ------------------------------------------------------------------

class TargetTooSmallError(ValidationError):
    """Target grid too small to decompose into 2x2 virtual targets."""


class TooFewResidualsError(ValidationError):
    """Every image-grid cell is below the residual-count threshold."""


class ReplicateFailureError(SolverError):
    """More than the tolerated fraction of bootstrap replicates failed."""


class GridTooSmallError(ValidationError):
    """Evaluation grid too small for the model-matrix projector."""


class DimensionMismatchError(ValidationError):
    """Matrix dimensions do not agree."""


class NotPSDError(ValidationError):
    """A matrix required to be positive semi-definite is not."""


# -- simulation --------------------------------------------------------------

class CannotPlaceTargetError(ValidationError):
    """Pose rejection rate exceeded 99% while simulating frames."""
