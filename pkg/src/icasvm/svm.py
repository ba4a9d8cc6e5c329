"""Soft-margin kernel SVM trained by SMO, with hyperplane translation.

The translation ``tau`` moves the decision boundary into the positive
class: calibrated predictions are ``d(x) - tau > 0``. ``tau`` is the
two-class mean of ``|d(s_i)|`` over support vectors with slack above one
(misclassified by the raw hyperplane), falling back to margin violators
``0 < xi < 1`` for a class that has none.
"""
import copy
import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from ._serial import decode_array, encode_array
from ._validation import check_binary_labels
from .exceptions import ArgumentError

__all__ = ["KernelSpec", "TranslatedSVC", "train", "decision", "calibrate_translation",
           "predict_threshold", "translation_from_slacks", "save_svm", "load_svm"]

logger = logging.getLogger(__name__)

KERNELS = ("linear", "polynomial", "rbf")
_FULL_GRAM_LIMIT = 4000
_ROW_CACHE_BYTES = 256 * 2 ** 20
_TAU = 1e-12


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and parameters.

    polynomial: ``(gamma * x.y + coef) ** degree``; rbf:
    ``exp(-gamma * |x - y|^2)``; linear: ``x.y``.
    """

    kind: str = "rbf"
    gamma: float = 1.0
    coef: float = 0.0
    degree: int = 3

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ArgumentError(f"kernel must be one of {KERNELS}, got {self.kind!r}")
        if not (math.isfinite(self.gamma) and math.isfinite(self.coef)):
            raise ArgumentError("kernel parameters must be finite")
        if self.kind != "linear" and self.gamma <= 0:
            raise ArgumentError(f"gamma must be > 0 for {self.kind}, got {self.gamma}")
        if self.kind == "polynomial" and (int(self.degree) != self.degree or self.degree < 1):
            raise ArgumentError(f"degree must be an integer >= 1, got {self.degree}")

    def __call__(self, X, Y):
        """Kernel matrix between the rows of ``X`` and ``Y``."""
        dot = X @ Y.T
        if self.kind == "linear":
            return dot
        if self.kind == "polynomial":
            return (self.gamma * dot + self.coef) ** int(self.degree)
        sq = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * dot
        return np.exp(-self.gamma * np.maximum(sq, 0.0))

    def diag(self, X):
        if self.kind == "rbf":
            return np.ones(X.shape[0])
        dot = (X * X).sum(1)
        if self.kind == "linear":
            return dot
        return (self.gamma * dot + self.coef) ** int(self.degree)


class _QMatrix:
    """Rows of Q = y_i y_j K(x_i, x_j), fully materialized when small."""

    def __init__(self, kernel, X, y):
        self.kernel, self.X, self.y = kernel, X, y
        n = X.shape[0]
        self.full = None
        if n <= _FULL_GRAM_LIMIT:
            self.full = kernel(X, X) * np.outer(y, y)
        self.cache = OrderedDict()
        self.capacity = max(2, _ROW_CACHE_BYTES // (8 * n))
        self.diag = kernel.diag(X)

    def row(self, i):
        if self.full is not None:
            return self.full[i]
        r = self.cache.get(i)
        if r is None:
            r = self.kernel(self.X[i:i + 1], self.X)[0] * (self.y[i] * self.y)
            self.cache[i] = r
            if len(self.cache) > self.capacity:
                self.cache.popitem(last=False)
        else:
            self.cache.move_to_end(i)
        return r


def _smo(Q, y, C, tol, max_iter):
    """Solve min 1/2 a'Qa - sum(a), 0 <= a <= C, y'a = 0.

    Each step updates the maximal violating pair analytically.
    Returns alpha, gradient, number of updates and the final gap.
    """
    n = y.shape[0]
    alpha = np.zeros(n)
    G = -np.ones(n)
    pos = y > 0
    n_iter = 0
    gap = np.inf
    while n_iter < max_iter:
        v = -y * G
        up = np.where(pos, alpha < C, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < C)
        v_up = np.where(up, v, -np.inf)
        v_low = np.where(low, v, np.inf)
        i = int(np.argmax(v_up))
        j = int(np.argmin(v_low))
        gap = v_up[i] - v_low[j]
        if gap < tol:
            break
        Qi, Qj = Q.row(i), Q.row(j)
        ai, aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = Q.diag[i] + Q.diag[j] + 2.0 * Qi[j]
            delta = (-G[i] - G[j]) / max(quad, _TAU)
            diff = ai - aj
            ni, nj = ai + delta, aj + delta
            if diff > 0:
                if nj < 0:
                    nj, ni = 0.0, diff
            elif ni < 0:
                ni, nj = 0.0, -diff
            if diff > 0:
                if ni > C:
                    ni, nj = C, C - diff
            elif nj > C:
                nj, ni = C, C + diff
        else:
            quad = Q.diag[i] + Q.diag[j] - 2.0 * Qi[j]
            delta = (G[i] - G[j]) / max(quad, _TAU)
            total = ai + aj
            ni, nj = ai - delta, aj + delta
            if total > C:
                if ni > C:
                    ni, nj = C, total - C
                if nj > C:
                    nj, ni = C, total - C
            else:
                if nj < 0:
                    nj, ni = 0.0, total
                if ni < 0:
                    ni, nj = 0.0, total
        alpha[i], alpha[j] = ni, nj
        G += Qi * (ni - ai) + Qj * (nj - aj)
        n_iter += 1
    return alpha, G, n_iter, gap


def _bias(alpha, G, y, C):
    """Intercept from free SVs, else the midpoint of the feasible interval."""
    v = -y * G
    free = (alpha > 0) & (alpha < C)
    if free.any():
        return float(v[free].mean()), False
    pos = y > 0
    up = np.where(pos, alpha < C, alpha > 0)
    low = np.where(pos, alpha > 0, alpha < C)
    lo = v[up].max() if up.any() else v[low].min()
    hi = v[low].min() if low.any() else v[up].max()
    return float((lo + hi) / 2.0), True


def translation_from_slacks(decisions, labels, slacks, slack_eps=1e-3):
    """Translation offset from support-vector decisions and slacks.

    Per class, average ``|d|`` over SVs with ``xi > 1``; if the class has
    none, over SVs with ``slack_eps < xi < 1``. The offset is the mean of
    the available class averages; 0 when neither class contributes.

    Returns
    -------
    tau : float
    flags : list of str
    """
    d = np.asarray(decisions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    xi = np.asarray(slacks, dtype=np.float64)
    flags = []
    means = []
    for cls, name in ((1.0, "positive"), (-1.0, "negative")):
        in_cls = y == cls
        sel = in_cls & (xi > 1.0)
        if not sel.any():
            sel = in_cls & (xi > slack_eps) & (xi < 1.0)
            if sel.any():
                flags.append(f"translation_margin_fallback_{name}")
        if sel.any():
            means.append(float(np.mean(np.abs(d[sel]))))
        else:
            flags.append(f"translation_no_svs_{name}")
    if not means:
        flags.append("translation_zero")
        return 0.0, flags
    return float(np.mean(means)), flags


class TranslatedSVC(ClassifierMixin, BaseEstimator):
    """Binary kernel SVM with an optional translated decision boundary.

    Parameters
    ----------
    kernel : {'linear', 'polynomial', 'rbf'}, default='rbf'
    C : float, default=1.0
        Box constraint.
    gamma : float or 'scale', default='scale'
        'scale' uses ``1 / (n_features * X.var())``.
    coef0 : float, default=0.0
    degree : int, default=3
    tol : float, default=1e-3
        Stop when the maximal KKT violation falls below ``tol``.
    max_iter : int, default=1_000_000
        Cap on pair updates.
    random_state : int, optional
        Recorded for provenance; training itself is deterministic.

    Attributes
    ----------
    support_ : ndarray of int
        Training indices with nonzero dual weight.
    support_vectors_ : ndarray of shape (n_SV, n_features)
    dual_coef_ : ndarray of shape (n_SV,)
        ``alpha_i * y_i``.
    intercept_ : float
    slacks_ : ndarray of shape (n_SV,)
    translation_ : float
        Zero after :meth:`fit`; set by :meth:`calibrate`.
    kernel_spec_ : KernelSpec
    flags_ : list of str
    """

    def __init__(self, kernel="rbf", C=1.0, gamma="scale", coef0=0.0, degree=3,
                 tol=1e-3, max_iter=1_000_000, random_state=None):
        self.kernel = kernel
        self.C = C
        self.gamma = gamma
        self.coef0 = coef0
        self.degree = degree
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def _resolve_kernel(self, X):
        gamma = self.gamma
        if gamma == "scale":
            var = X.var()
            gamma = 1.0 / (X.shape[1] * var) if var > 0 else 1.0
        return KernelSpec(self.kernel, float(gamma), float(self.coef0), int(self.degree))

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        if not (self.C > 0 and math.isfinite(self.C)):
            raise ArgumentError(f"C must be positive and finite, got {self.C}")
        labels = np.asarray(y)
        yy = check_binary_labels(labels, X.shape[0])
        self.classes_ = np.array([labels[yy < 0][0], labels[yy > 0][0]])
        self.kernel_spec_ = self._resolve_kernel(X)
        Q = _QMatrix(self.kernel_spec_, X, yy)
        C = float(self.C)
        alpha, G, n_iter, gap = _smo(Q, yy, C, self.tol, self.max_iter)
        flags = []
        if gap >= self.tol:
            flags.append("max_iter_reached")
            logger.warning("SMO stopped at %d updates with KKT gap %.3g", n_iter, gap)
        b, from_bounds = _bias(alpha, G, yy, C)
        if from_bounds:
            flags.append("bias_from_bounds")
        sv = np.flatnonzero(alpha > 0)
        self.support_ = sv
        self.support_vectors_ = X[sv]
        self.dual_coef_ = alpha[sv] * yy[sv]
        self.intercept_ = b
        self.n_iter_ = n_iter
        self.kkt_gap_ = float(gap)
        self.n_features_in_ = X.shape[1]
        self.slacks_ = np.maximum(0.0, 1.0 - yy[sv] * self.decision_function(X[sv]))
        self.translation_ = 0.0
        self.flags_ = flags
        return self

    @property
    def sv_labels_(self):
        return np.sign(self.dual_coef_)

    def decision_function(self, X, chunk=4096):
        """Signed value ``d(x) = sum_i alpha_i y_i K(s_i, x) + w0``."""
        check_is_fitted(self, "dual_coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ArgumentError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        out = np.empty(X.shape[0])
        for s in range(0, X.shape[0], chunk):
            K = self.kernel_spec_(X[s:s + chunk], self.support_vectors_)
            out[s:s + chunk] = K @ self.dual_coef_ + self.intercept_
        return out

    def predict_threshold(self, X, k):
        """1 where ``d(x) + k > 0``, else 0."""
        return (self.decision_function(X) + k > 0).astype(np.int64)

    def predict(self, X):
        """Class labels at the calibrated boundary ``d(x) - tau > 0``."""
        return self.classes_[self.predict_threshold(X, -self.translation_)]

    def calibrate(self, slack_eps=None):
        """Set ``translation_`` from the stored support-vector slacks."""
        check_is_fitted(self, "slacks_")
        eps = self.tol if slack_eps is None else slack_eps
        d = self.decision_function(self.support_vectors_)
        tau, flags = translation_from_slacks(d, self.sv_labels_, self.slacks_, eps)
        self.translation_ = tau
        self.flags_ = [f for f in self.flags_ if not f.startswith("translation_")] + flags
        return self

    def weight_vector(self):
        """Primal ``w`` for the linear kernel."""
        if self.kernel_spec_.kind != "linear":
            raise ArgumentError("primal weights exist only for the linear kernel")
        return self.dual_coef_ @ self.support_vectors_

    def to_dict(self):
        check_is_fitted(self, "dual_coef_")
        return {
            "kernel": asdict(self.kernel_spec_),
            "C": float(self.C),
            "sv": encode_array(self.support_vectors_),
            "coeffs": [float(c) for c in self.dual_coef_],
            "bias": float(self.intercept_),
            "slacks": [float(s) for s in self.slacks_],
            "translation": float(self.translation_),
            "flags": list(self.flags_),
            "classes": [c.item() if hasattr(c, "item") else c for c in self.classes_],
            "tol": float(self.tol),
        }

    @classmethod
    def from_dict(cls, d):
        ks = KernelSpec(**d["kernel"])
        model = cls(kernel=ks.kind, C=d["C"], gamma=ks.gamma, coef0=ks.coef,
                    degree=ks.degree, tol=d.get("tol", 1e-3))
        model.kernel_spec_ = ks
        model.support_vectors_ = decode_array(d["sv"])
        model.dual_coef_ = np.asarray(d["coeffs"], dtype=np.float64)
        model.intercept_ = float(d["bias"])
        model.slacks_ = np.asarray(d["slacks"], dtype=np.float64)
        model.translation_ = float(d["translation"])
        model.flags_ = list(d.get("flags", []))
        model.classes_ = np.asarray(d.get("classes", [0, 1]))
        model.n_features_in_ = model.support_vectors_.shape[1]
        model.support_ = np.arange(model.support_vectors_.shape[0])
        return model


def train(features, labels, kernel=None, C=1.0, seed=None, **kwargs):
    """Fit a :class:`TranslatedSVC` from a :class:`KernelSpec` (default rbf, gamma 1)."""
    kernel = kernel or KernelSpec()
    return TranslatedSVC(kernel=kernel.kind, C=C, gamma=kernel.gamma, coef0=kernel.coef,
                         degree=kernel.degree, random_state=seed, **kwargs).fit(features, labels)


def decision(model, x):
    x = np.asarray(x, dtype=np.float64)
    out = model.decision_function(np.atleast_2d(x))
    return float(out[0]) if x.ndim == 1 else out


def calibrate_translation(model):
    """Calibrated copy of ``model``; the input is left untouched."""
    return copy.deepcopy(model).calibrate()


def predict_threshold(model, x, k):
    x = np.asarray(x, dtype=np.float64)
    out = model.predict_threshold(np.atleast_2d(x), k)
    return int(out[0]) if x.ndim == 1 else out


def save_svm(path, model):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_svm(path):
    with open(path) as fh:
        return TranslatedSVC.from_dict(json.load(fh))
