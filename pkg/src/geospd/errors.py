"""Exception and warning types shared across the toolkit."""


class GeoSpdError(Exception):
    """Base class for all toolkit errors."""


class InvalidInput(GeoSpdError, ValueError):
    """An argument violates a documented precondition."""


class NotPositiveDefinite(GeoSpdError, ArithmeticError):
    """A matrix expected to be positive definite has an eigenvalue <= 0."""


class NumericalFailure(GeoSpdError, ArithmeticError):
    """A numerical routine failed to converge or produced non-finite values."""


class IncompatibleFormat(GeoSpdError, ValueError):
    """An on-disk artifact has an unrecognized or unsupported format/version."""


class CorruptData(GeoSpdError, ValueError):
    """An on-disk artifact is structurally damaged (truncated, inconsistent)."""


class IoError(GeoSpdError, OSError):
    """An I/O operation on a dataset or checkpoint failed."""


class NumericsWarning(UserWarning):
    """A computation hit a guarded numerical edge (clamped eigenvalue,
    zero-norm vector treated as zero similarity, and the like)."""


class MetricsWarning(UserWarning):
    """A requested metric is undefined for the given data (e.g. AUROC on a
    single-class set) and was reported as NaN."""
