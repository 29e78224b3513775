"""Exception taxonomy for proxigmm.

Every error raised by the library derives from :class:`ProxiGmmError`, so
callers can catch one type at an estimation boundary (a Monte Carlo worker,
a CLI command) and treat the replication or run as failed.
"""


class ProxiGmmError(Exception):
    """Base class for all proxigmm errors."""


# ---------------------------------------------------------------------------
# data loading / validation


class MissingColumn(ProxiGmmError):
    """A column named in the variable roles is absent from the file."""


class NonBinaryTreatment(ProxiGmmError):
    """The treatment column contains a value other than 0 or 1."""


class NonFiniteValue(ProxiGmmError):
    """A required cell is NaN, infinite, or not parseable as a number."""


class EmptyData(ProxiGmmError):
    """The file or dataset has no observation rows."""


class UnknownColumn(ProxiGmmError):
    """A requested column name does not exist in the dataset."""


# ---------------------------------------------------------------------------
# sieve basis construction


class KTooLarge(ProxiGmmError):
    """More basis columns were requested than the term family provides."""


class DegenerateColumn(ProxiGmmError):
    """A generated basis column is numerically constant zero."""


class RankDeficient(ProxiGmmError):
    """Basis columns are linearly dependent beyond the drop tolerance."""


class DimensionMismatch(ProxiGmmError):
    """An input's shape is inconsistent with the fitted object."""


# ---------------------------------------------------------------------------
# bridge functions


class DegenerateConfounding(ProxiGmmError):
    """Closed-form bridge coefficients are undefined because a proxy does
    not load on the unmeasured confounder."""


# ---------------------------------------------------------------------------
# GMM core


class RankDeficientJacobian(ProxiGmmError):
    """The moment Jacobian does not identify the bridge parameters."""


class TooFewMoments(ProxiGmmError):
    """Fewer spectral directions were retained than parameters to identify."""


class SingularVariance(ProxiGmmError):
    """The sandwich variance matrix could not be inverted."""


class NoConvergence(ProxiGmmError):
    """An iterative solver exhausted its iteration or restart budget."""


# ---------------------------------------------------------------------------
# moment-count selection


class SingularUpsilonBlock(ProxiGmmError):
    """The bridge-moment covariance block is singular at a candidate K."""


class AllCandidatesSingular(ProxiGmmError):
    """Every candidate moment count produced a singular criterion."""


# ---------------------------------------------------------------------------
# baseline estimators


class RankDeficientDesign(ProxiGmmError):
    """A regression design matrix is rank deficient."""


class SingularSystem(ProxiGmmError):
    """An exactly identified estimating-equation system is singular."""


class WeakRank(ProxiGmmError):
    """Instruments are rank deficient for the first-stage projection."""
