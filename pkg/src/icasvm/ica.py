"""Temporal source decomposition of voxel enhancement curves.

The estimators follow the scikit-learn layout: ``X`` has one row per voxel
and one column per time point. A fitted model holds a mixing matrix whose
columns are temporal curves; voxel scores are the least-squares
coordinates of a curve in the span of the retained columns.
"""
import json

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._serial import decode_array, encode_array
from ._validation import check_curves
from .exceptions import ArgumentError, ConditioningError, ConvergenceError, RankError

__all__ = ["TemporalICA", "TemporalPCA", "fit_ica", "fit_pca", "rank_mse",
           "project", "projector", "load_model", "save_model"]

MAX_GRAM_CONDITION = 1e12
_RANK_RTOL = 1e-10


def projector(A):
    """Orthogonal projector onto span(A): A (A^T A)^-1 A^T."""
    A = np.asarray(A, dtype=np.float64)
    return A @ np.linalg.solve(A.T @ A, A.T)


def _whiten(X, p):
    """Center rows of ``X`` (M x N) and whiten to ``p`` dimensions."""
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / X.shape[0]
    evals, evecs = linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    if evals[0] <= 0 or evals[p - 1] <= _RANK_RTOL * evals[0]:
        raise RankError(f"covariance rank is below the requested {p} components")
    N = X.shape[1]
    K = np.zeros((N, N))
    K[:p] = evecs[:, :p].T / np.sqrt(evals[:p])[:, None]
    return mean, K, evals, evecs


def _sym_decorrelation(W):
    s, u = linalg.eigh(W @ W.T)
    return (u / np.sqrt(s)) @ u.T @ W


def _fastica_symmetric(Z, rng, tol, max_iter):
    """Fixed-point iteration with the log-cosh contrast, all rows at once."""
    p, M = Z.shape
    W = _sym_decorrelation(rng.standard_normal((p, p)))
    for it in range(1, max_iter + 1):
        G = np.tanh(W @ Z)
        g_prime = (1.0 - G ** 2).mean(axis=1)
        W_new = _sym_decorrelation(G @ Z.T / M - g_prime[:, None] * W)
        lim = np.min(np.abs(np.einsum("ij,ij->i", W_new, W)))
        W = W_new
        if lim > 1.0 - tol:
            return W, it
    raise ConvergenceError(f"FastICA did not converge in {max_iter} iterations", max_iter)


def _fix_signs(mixing):
    """Orient each column so its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(mixing), axis=0)
    signs = np.sign(mixing[idx, np.arange(mixing.shape[1])])
    signs[signs == 0] = 1.0
    return mixing * signs, signs


class _TemporalBasis(TransformerMixin, BaseEstimator):
    """Shared projection/serialization logic for fitted temporal bases."""

    kind = None

    def _check_h(self, h):
        p = self.mixing_.shape[1]
        h = p if h is None else int(h)
        if not 1 <= h <= p:
            raise ArgumentError(f"retained components must be in [1, {p}], got {h}")
        return h

    def retained_mixing(self, h=None):
        """Mixing columns of the first ``h`` components in ranked order."""
        check_is_fitted(self, "mixing_")
        return self.mixing_[:, self.order_[: self._check_h(h)]]

    def scores(self, X, h=None):
        """Project curves onto the first ``h`` ranked components.

        Parameters
        ----------
        X : array-like of shape (n_voxels, n_time) or (n_time,)

        Returns
        -------
        ndarray of shape (n_voxels, h) or (h,)
        """
        A = self.retained_mixing(h)
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X2 = check_curves(X[np.newaxis] if single else X, n_time=A.shape[0])
        gram = A.T @ A
        if np.linalg.cond(gram) > MAX_GRAM_CONDITION:
            raise ConditioningError("Gram matrix of the retained basis is ill-conditioned")
        S = linalg.solve(gram, A.T @ X2.T, assume_a="pos").T
        return S[0] if single else S

    def transform(self, X):
        return self.scores(X, self.n_retained)

    def inverse_transform(self, S, h=None):
        return np.asarray(S) @ self.retained_mixing(h if h is not None else np.shape(S)[-1]).T

    def reconstruction_mse(self, X, h=None):
        """Mean squared error of reconstructing ``X`` from ``h`` ranked components."""
        X = np.asarray(X, dtype=np.float64)
        R = X - self.inverse_transform(self.scores(X, h), h)
        return float(np.mean(R ** 2))

    def to_dict(self):
        check_is_fitted(self, "mixing_")
        return {
            "kind": self.kind,
            "n_time": int(self.mixing_.shape[0]),
            "n_components": int(self.mixing_.shape[1]),
            "mixing": encode_array(self.mixing_),
            "whitening_matrix": encode_array(self.whitening_),
            "whitening_mean": encode_array(self.mean_),
            "order": [int(i) for i in self.order_],
            "mse": [float(v) for v in self.mse_],
            "seed": self.random_state,
        }

    @classmethod
    def from_dict(cls, d):
        model = cls(n_components=d["n_components"], random_state=d.get("seed"))
        model.mixing_ = decode_array(d["mixing"])
        model.whitening_ = decode_array(d["whitening_matrix"])
        model.mean_ = decode_array(d["whitening_mean"])
        model.order_ = np.asarray(d["order"], dtype=np.int64)
        model.mse_ = np.asarray(d["mse"], dtype=np.float64)
        model.n_features_in_ = model.mixing_.shape[0]
        return model


class TemporalICA(_TemporalBasis):
    """FastICA on voxel time curves, components ranked by rank-1 MSE.

    Parameters
    ----------
    n_components : int, optional
        Number of sources ``p``; defaults to the number of time points.
    n_retained : int, optional
        Components kept by :meth:`transform` (first ``h`` in MSE order).
    tol : float, default=1e-6
        Convergence when ``min |diag(W_k W_{k-1}^T)| > 1 - tol``.
    max_iter : int, default=500
    random_state : int, default=0
        Seed of the initial unmixing matrix. Required for reproducibility.

    Attributes
    ----------
    mixing_ : ndarray of shape (n_time, n_components)
    unmixing_ : ndarray of shape (n_components, n_time)
        Maps centered curves to sources.
    whitening_ : ndarray of shape (n_time, n_time)
        First ``n_components`` rows whiten centered curves; the rest are zero.
    mean_ : ndarray of shape (n_time,)
    order_ : ndarray of int
        Component indices sorted by ascending ``mse_``.
    mse_ : ndarray of shape (n_components,)
    n_iter_ : int
    """

    kind = "ica"

    def __init__(self, n_components=None, n_retained=None, tol=1e-6, max_iter=500,
                 random_state=0):
        self.n_components = n_components
        self.n_retained = n_retained
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_curves(X)
        M, N = X.shape
        p = N if self.n_components is None else int(self.n_components)
        if not 1 <= p <= N <= M:
            raise ArgumentError(f"need 1 <= p <= n_time <= n_voxels, got p={p}, N={N}, M={M}")
        mean, K, _, _ = _whiten(X, p)
        Z = K[:p] @ (X - mean).T
        rng = np.random.default_rng(self.random_state)
        W, n_iter = _fastica_symmetric(Z, rng, self.tol, self.max_iter)
        mixing, signs = _fix_signs(linalg.pinv(W @ K[:p]))
        self.mean_ = mean
        self.whitening_ = K
        self.unmixing_ = (W * signs[:, None]) @ K[:p]
        self.mixing_ = mixing
        self.n_iter_ = n_iter
        self.n_features_in_ = N
        self.order_, self.mse_ = rank_mse(X, self)
        return self

    def sources(self, X):
        """Unmixed (centered) sources of ``X``, one column per component."""
        check_is_fitted(self, "unmixing_")
        X = check_curves(X, n_time=self.mixing_.shape[0])
        return (X - self.mean_) @ self.unmixing_.T


class TemporalPCA(_TemporalBasis):
    """Principal temporal eigenvectors; the PCA baseline.

    ``order_`` follows descending eigenvalue. ``mse_`` is reported in the
    same component indexing but does not drive the order.
    """

    kind = "pca"

    def __init__(self, n_components=None, n_retained=None, random_state=None):
        self.n_components = n_components
        self.n_retained = n_retained
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_curves(X)
        M, N = X.shape
        p = N if self.n_components is None else int(self.n_components)
        if not 1 <= p <= N <= M:
            raise ArgumentError(f"need 1 <= p <= n_time <= n_voxels, got p={p}, N={N}, M={M}")
        mean, K, evals, evecs = _whiten(X, p)
        self.mean_ = mean
        self.whitening_ = K
        self.mixing_, _ = _fix_signs(evecs[:, :p])
        self.explained_variance_ = evals[:p]
        self.n_features_in_ = N
        self.order_ = np.arange(p)
        self.mse_ = _mse_per_component(X, self.mixing_)
        return self


def _mse_per_component(X, mixing):
    gram = mixing.T @ mixing
    S = linalg.solve(gram, mixing.T @ X.T, assume_a="pos")  # p x M
    mse = np.empty(mixing.shape[1])
    for k in range(mixing.shape[1]):
        R = X.T - np.outer(mixing[:, k], S[k])
        mse[k] = np.mean(R * R)
    return mse


def rank_mse(X, model):
    """Rank-1 reconstruction error of every component and the ascending order.

    Scores are the least-squares coordinates of each curve on the full
    mixing matrix; ``mse[k] = mean((x_i(t_j) - a_jk s_ki)^2)`` over all
    voxels and time points. Ties keep component index order.
    """
    X = check_curves(X, n_time=model.mixing_.shape[0])
    mse = _mse_per_component(X, model.mixing_)
    order = np.argsort(mse, kind="stable")
    return order, mse


def fit_ica(X, p, seed=0, **kwargs):
    return TemporalICA(n_components=p, random_state=seed, **kwargs).fit(X)


def fit_pca(X, p):
    return TemporalPCA(n_components=p).fit(X)


def project(x, model, h=None):
    """Scores of curve(s) ``x`` on the first ``h`` ranked components."""
    return model.scores(x, h)


_KINDS = {"ica": TemporalICA, "pca": TemporalPCA}


def save_model(path, model):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        d = json.load(fh)
    return _KINDS[d.get("kind", "ica")].from_dict(d)
