"""Exception types raised across the package."""


class IcaSvmError(Exception):
    """Base class for all package errors."""


class FormatError(IcaSvmError):
    """Missing or malformed DVOL/ROI header."""


class SizeError(IcaSvmError):
    """Payload length disagrees with the header."""


class DataError(IcaSvmError):
    """Non-finite values in a payload."""


class GeometryError(IcaSvmError, ValueError):
    """Degenerate geometry (polygons, too few planes)."""


class ArgumentError(IcaSvmError, ValueError):
    """Invalid argument value."""


class EmptySelectionError(IcaSvmError, ValueError):
    """A mask selects no voxels."""


class RankError(IcaSvmError, ValueError):
    """Covariance is singular at the requested component count."""


class ConvergenceError(IcaSvmError, RuntimeError):
    """An iterative solver did not converge.

    Attributes
    ----------
    n_iter : int
        Number of iterations performed before giving up.
    """

    def __init__(self, message, n_iter):
        super().__init__(message)
        self.n_iter = n_iter


class ConditioningError(IcaSvmError, ValueError):
    """Gram matrix too ill-conditioned to project onto."""


class LabelError(IcaSvmError, ValueError):
    """Labels unusable for training (e.g. a single class)."""


class SamplingError(IcaSvmError, ValueError):
    """Not enough voxels to draw the requested sample."""


class SpecError(IcaSvmError, ValueError):
    """Invalid phantom or pipeline specification."""


class CaseError(IcaSvmError):
    """Failure while processing a named case.

    Attributes
    ----------
    case_id : str
    """

    def __init__(self, case_id, cause):
        super().__init__(f"case {case_id!r}: {cause}")
        self.case_id = case_id
        self.cause = cause
