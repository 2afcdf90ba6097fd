"""Kernel estimators with a scikit-learn interface.

``NadarayaWatsonRegressor`` estimates conditional means (Nelson derivatives are
conditional means of difference quotients) and ``GaussianKDE`` estimates a density
together with its log-gradient, which enters the backward drift.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, DensityMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import EstimationError

_MAX_GRID = {1: 8192, 2: 512, 3: 96}


def silverman_bandwidth(X):
    """Rule-of-thumb isotropic bandwidth ``s * (4 / ((d + 2) n)) ** (1 / (d + 4))``."""
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    spread = float(np.mean(X.std(axis=0)))
    if not spread > 0:
        raise EstimationError("degenerate sample: zero spread")
    return spread * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


class NadarayaWatsonRegressor(RegressorMixin, BaseEstimator):
    """Gaussian-kernel local-constant regression with pointwise standard errors.

    Parameters
    ----------
    bandwidth : float
        Kernel standard deviation in the units of ``X``.
    min_samples : float
        Query points whose effective sample count ``(sum w)^2 / sum w^2`` falls below this
        are reported as NaN instead of being extrapolated.
    """

    def __init__(self, bandwidth=0.1, min_samples=20):
        self.bandwidth = bandwidth
        self.min_samples = min_samples

    def fit(self, X, y, sample_weight=None):
        X = check_array(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y have different numbers of rows")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        self.X_ = X
        self.y_ = y.reshape(len(y), -1)
        self._single_output = y.ndim == 1
        self.sample_weight_ = None if sample_weight is None else np.asarray(sample_weight, float)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_full(self, X):
        """Return ``(mean, stderr, n_eff)`` at the query points."""
        check_is_fitted(self, "X_")
        Q = check_array(X, dtype=float)
        if Q.shape[1] != self.n_features_in_:
            raise ValueError("query dimension differs from the training data")
        q = self.y_.shape[1]
        mean = np.full((len(Q), q), np.nan)
        se = np.full((len(Q), q), np.nan)
        n_eff = np.zeros(len(Q))
        inv = 1.0 / (2.0 * self.bandwidth**2)
        for i, point in enumerate(Q):
            w = np.exp(-np.sum((self.X_ - point) ** 2, axis=1) * inv)
            if self.sample_weight_ is not None:
                w *= self.sample_weight_
            sw, sw2 = w.sum(), np.dot(w, w)
            if sw <= 0:
                continue
            n_eff[i] = sw * sw / sw2
            if n_eff[i] < self.min_samples:
                continue
            m = w @ self.y_ / sw
            resid = self.y_ - m
            mean[i] = m
            se[i] = np.sqrt((w * w) @ (resid * resid)) / sw
        if self._single_output:
            return mean[:, 0], se[:, 0], n_eff
        return mean, se, n_eff

    def predict(self, X, return_std=False):
        mean, se, _ = self.predict_full(X)
        return (mean, se) if return_std else mean


class GaussianKDE(DensityMixin, BaseEstimator):
    """Isotropic Gaussian kernel density estimate with analytic log-gradient.

    ``method="binned"`` bins the sample linearly onto a grid and smooths it with Gaussian
    filters (derivative orders give the gradient), then interpolates; ``method="exact"``
    sums over all sample points and is meant for small samples and for cross-checks.
    """

    def __init__(self, bandwidth="silverman", method="binned", grid_step=None, pad=5.0):
        self.bandwidth = bandwidth
        self.method = method
        self.grid_step = grid_step
        self.pad = pad

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        n, d = X.shape
        if np.any(X.std(axis=0) <= 0):
            raise EstimationError("degenerate sample: zero spread along some axis")
        self.bandwidth_ = silverman_bandwidth(X) if self.bandwidth == "silverman" else float(self.bandwidth)
        if not self.bandwidth_ > 0:
            raise ValueError("bandwidth must be positive")
        if self.method not in ("binned", "exact"):
            raise ValueError("method must be 'binned' or 'exact'")
        self.X_ = X
        self.n_features_in_ = d
        if self.method == "binned":
            self._build_grid()
        return self

    def _build_grid(self):
        X, h = self.X_, self.bandwidth_
        n, d = X.shape
        lo = X.min(axis=0) - self.pad * h
        hi = X.max(axis=0) + self.pad * h
        step = self.grid_step or h / 3.0
        sizes = np.minimum(np.ceil((hi - lo) / step).astype(int) + 1, _MAX_GRID[d])
        dx = (hi - lo) / (sizes - 1)
        counts = _linear_binning(X, lo, dx, sizes)
        norm = n * np.prod(dx)
        sig = h / dx
        self.grid_lo_, self.grid_dx_, self.grid_shape_ = lo, dx, tuple(sizes)
        self.density_grid_ = ndimage.gaussian_filter(counts, sig, mode="constant", truncate=6.0) / norm
        grads = []
        for j in range(d):
            order = [0] * d
            order[j] = 1
            g = ndimage.gaussian_filter(counts, sig, order=order, mode="constant", truncate=6.0)
            grads.append(g / (norm * dx[j]))
        self.grad_grid_ = np.stack(grads, axis=-1)

    def _grid_coords(self, Q):
        return ((Q - self.grid_lo_) / self.grid_dx_).T

    def _interp(self, grid, Q):
        return ndimage.map_coordinates(grid, self._grid_coords(Q), order=3, mode="constant", cval=0.0)

    def density(self, X):
        check_is_fitted(self, "X_")
        Q = check_array(X, dtype=float)
        if self.method == "binned":
            return np.maximum(self._interp(self.density_grid_, Q), 0.0)
        return self._exact(Q)[0]

    def gradient(self, X):
        check_is_fitted(self, "X_")
        Q = check_array(X, dtype=float)
        if self.method == "binned":
            return np.stack([self._interp(self.grad_grid_[..., j], Q)
                             for j in range(self.n_features_in_)], axis=-1)
        return self._exact(Q)[1]

    def grad_log(self, X):
        """``grad log rho`` at ``X``; NaN where the estimate vanishes."""
        rho, grad = self.density(X), self.gradient(X)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = grad / rho[:, None]
        out[rho <= 0] = np.nan
        return out

    def score_samples(self, X):
        with np.errstate(divide="ignore"):
            return np.log(self.density(X))

    def score(self, X, y=None):
        return float(np.sum(self.score_samples(X)))

    def _exact(self, Q, chunk=2048):
        X, h = self.X_, self.bandwidth_
        n, d = X.shape
        c = 1.0 / (n * (2 * np.pi * h * h) ** (d / 2))
        rho = np.empty(len(Q))
        grad = np.empty((len(Q), d))
        for s in range(0, len(Q), chunk):
            diff = Q[s:s + chunk, None, :] - X[None, :, :]
            k = np.exp(-np.sum(diff**2, axis=-1) / (2 * h * h))
            rho[s:s + chunk] = c * k.sum(axis=1)
            grad[s:s + chunk] = -c * np.einsum("qn,qnd->qd", k, diff) / (h * h)
        return rho, grad


def _linear_binning(X, lo, dx, sizes):
    """Distribute unit masses onto the grid corners with multilinear weights."""
    d = X.shape[1]
    pos = (X - lo) / dx
    base = np.clip(np.floor(pos).astype(int), 0, np.asarray(sizes) - 2)
    frac = pos - base
    counts = np.zeros(tuple(sizes))
    for corner in range(2**d):
        bits = [(corner >> j) & 1 for j in range(d)]
        w = np.ones(len(X))
        idx = []
        for j, bit in enumerate(bits):
            w *= frac[:, j] if bit else 1.0 - frac[:, j]
            idx.append(base[:, j] + bit)
        np.add.at(counts, tuple(idx), w)
    return counts
