"""Input validation helpers shared by the estimators."""
import numpy as np
from sklearn.utils import check_array

from .exceptions import ArgumentError, LabelError


def check_curves(X, n_time=None):
    """Return voxel curves as a finite float64 (n_voxels, n_time) array.

    A :class:`~icasvm.volume.VoxelMatrix` is accepted and transposed into
    the estimator layout.
    """
    if hasattr(X, "samples") and hasattr(X, "index"):
        X = X.samples
    X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    if n_time is not None and X.shape[1] != n_time:
        raise ArgumentError(f"expected curves of length {n_time}, got {X.shape[1]}")
    return X


def check_binary_labels(y, n_samples=None):
    """Map labels to a float array of +-1. Accepts {-1, 1}, {0, 1} or bools."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise LabelError("labels must be one-dimensional")
    if n_samples is not None and y.shape[0] != n_samples:
        raise LabelError(f"got {y.shape[0]} labels for {n_samples} samples")
    values = set(np.unique(y).tolist())
    if values <= {-1, 1}:
        out = y.astype(np.float64)
    elif values <= {0, 1} or y.dtype == bool:
        out = np.where(y.astype(bool), 1.0, -1.0)
    else:
        raise LabelError(f"labels must be binary, got values {sorted(values)}")
    if len(np.unique(out)) < 2:
        raise LabelError("training requires both classes")
    return out
