"""Covariance / precision algebra and the predictability checks.

A :class:`CovarianceSpec` owns a validated SPD matrix together with its cached
precision and eigenvalues. Diagonal covariances never build the dense matrix
for their eigenvalues; dense ones go through ``numpy.linalg.eigh``.
"""
from dataclasses import dataclass
import warnings

import numpy as np

from .errors import DegenerateGramMatrix, DimensionMismatch, NonSPD

ASYMMETRY_TOL = 1e-12
DEFINITENESS_TOL = 1e-10
MARGIN_TOL = 1e-12
GRAM_FLOOR = 1e-14


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CovarianceSpec:
    """Validated covariance with cached precision.

    ``definite`` is False only for specs built with ``allow_singular=True``
    whose smallest eigenvalue is not strictly positive; the precision is then
    the Moore-Penrose pseudo-inverse and callers should treat the result with
    suspicion.
    """

    kind: str
    values: np.ndarray
    dim: int
    precision_values: np.ndarray
    eigenvalues: np.ndarray
    definite: bool = True

    @property
    def matrix(self):
        if self.kind == "diagonal":
            return np.diag(self.values)
        return np.array(self.values)

    @property
    def precision(self):
        if self.kind == "diagonal":
            return np.diag(self.precision_values)
        return np.array(self.precision_values)

    @property
    def min_eigenvalue(self):
        return float(self.eigenvalues[0])

    @property
    def max_eigenvalue(self):
        return float(self.eigenvalues[-1])

    @property
    def is_isotropic(self):
        return self.kind == "diagonal" and np.all(self.values == self.values[0])

    def apply_precision(self, v):
        """Return ``C^{-1} v`` (``v`` may be a vector or a matrix of columns)."""
        v = np.asarray(v, dtype=float)
        if self.kind == "diagonal":
            p = self.precision_values
            return p * v if v.ndim == 1 else p[:, None] * v
        return self.precision_values @ v

    def apply(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "diagonal":
            return self.values * v if v.ndim == 1 else self.values[:, None] * v
        return self.values @ v

    def mahalanobis_sq(self, v):
        """``v^T C^{-1} v``."""
        v = np.asarray(v, dtype=float)
        return float(v @ self.apply_precision(v))

    def inv_sqrt(self):
        """Symmetric inverse square root ``C^{-1/2}`` as a dense matrix."""
        if self.kind == "diagonal":
            return np.diag(1.0 / np.sqrt(self.values))
        w, v = np.linalg.eigh(self.values)
        return (v / np.sqrt(w)) @ v.T

    def scaled(self, c):
        return make_covariance(self.kind, c * np.asarray(self.values), self.dim)


def make_covariance(kind, values, dim=None, *, allow_singular=False):
    """Build a :class:`CovarianceSpec`.

    ``kind`` is ``"diagonal"`` (``values`` = variances) or ``"dense"``
    (``values`` = full symmetric matrix). With ``allow_singular`` a
    non-positive spectrum is accepted, a :class:`RuntimeWarning` is issued and
    the pseudo-inverse is cached instead of the inverse.
    """
    if kind not in ("diagonal", "dense"):
        raise ValueError(f"unknown covariance kind {kind!r}")
    vals = np.array(values, dtype=float)
    if kind == "diagonal":
        vals = np.atleast_1d(vals)
        if vals.ndim != 1:
            raise DimensionMismatch("diagonal covariance expects a 1-D array of variances")
        n = vals.shape[0]
        if dim is not None and dim != n:
            raise DimensionMismatch(f"dim={dim} but {n} variances given")
        if not np.all(np.isfinite(vals)):
            raise NonSPD("non-finite variance")
        eig = np.sort(vals)
        definite = bool(eig[0] > 0)
        if not definite:
            if not allow_singular:
                raise NonSPD(f"variance {eig[0]:g} is not positive", eig[0])
            warnings.warn("singular diagonal covariance; using pseudo-inverse", RuntimeWarning)
            prec = np.where(vals > 0, 1.0 / np.where(vals > 0, vals, 1.0), 0.0)
        else:
            prec = 1.0 / vals
        return CovarianceSpec("diagonal", _frozen(vals), n, _frozen(prec), _frozen(eig), definite)

    vals = np.atleast_2d(vals)
    if vals.ndim != 2 or vals.shape[0] != vals.shape[1]:
        raise DimensionMismatch(f"dense covariance must be square, got shape {vals.shape}")
    n = vals.shape[0]
    if dim is not None and dim != n:
        raise DimensionMismatch(f"dim={dim} but matrix is {n}x{n}")
    if not np.all(np.isfinite(vals)):
        raise NonSPD("non-finite covariance entry")
    scale = max(np.max(np.abs(vals)), np.finfo(float).tiny)
    if np.max(np.abs(vals - vals.T)) > ASYMMETRY_TOL * scale:
        raise NonSPD("covariance matrix is not symmetric")
    vals = 0.5 * (vals + vals.T)
    eig = np.linalg.eigvalsh(vals)
    definite = bool(eig[0] > 0)
    if not definite:
        if not allow_singular:
            raise NonSPD(f"min eigenvalue {eig[0]:g} is not positive", eig[0])
        warnings.warn("singular covariance; using pseudo-inverse", RuntimeWarning)
        prec = np.linalg.pinv(vals, hermitian=True)
    else:
        prec = np.linalg.inv(vals)
    prec = 0.5 * (prec + prec.T)
    return CovarianceSpec("dense", _frozen(vals), n, _frozen(prec), _frozen(eig), definite)


def isotropic(variance, dim):
    return make_covariance("diagonal", np.full(int(dim), float(variance)), int(dim))


def as_covariance(c, dim=None):
    """Coerce a spec, scalar variance, 1-D variances or dense matrix into a spec."""
    if isinstance(c, CovarianceSpec):
        if dim is not None and c.dim != dim:
            raise DimensionMismatch(f"covariance has dim {c.dim}, expected {dim}")
        return c
    a = np.asarray(c, dtype=float)
    if a.ndim == 0:
        if dim is None:
            raise DimensionMismatch("scalar covariance needs an explicit dim")
        return isotropic(float(a), dim)
    if a.ndim == 1:
        return make_covariance("diagonal", a, dim)
    return make_covariance("dense", a, dim)


@dataclass(frozen=True)
class RatioPrecision:
    """``R^{-1} - L^{-1}`` with its definiteness classification."""

    matrix: np.ndarray
    definiteness: str
    min_eigenvalue: float
    max_eigenvalue: float

    @property
    def positive_definite(self):
        return self.definiteness == "positive_definite"


def _classify(eig):
    lo, hi = float(eig[0]), float(eig[-1])
    if lo > DEFINITENESS_TOL:
        return "positive_definite"
    if hi < -DEFINITENESS_TOL:
        return "negative_definite"
    return "indefinite"


def ratio_precision(R, L):
    R = as_covariance(R)
    L = as_covariance(L, R.dim)
    if R.kind == "diagonal" and L.kind == "diagonal":
        d = R.precision_values - L.precision_values
        m = np.diag(d)
        eig = np.sort(d)
    else:
        m = R.precision - L.precision
        m = 0.5 * (m + m.T)
        eig = np.linalg.eigvalsh(m)
    return RatioPrecision(m, _classify(eig), float(eig[0]), float(eig[-1]))


@dataclass(frozen=True)
class PredictabilityCheck:
    holds: bool
    margin: float


def check_predictability(R, L, gamma=1.0):
    """Test ``lambda_min(L) >= gamma * lambda_max(R)``.

    The margin is ``lambda_min(L) - gamma * lambda_max(R)``; a margin within
    ``MARGIN_TOL`` (relative) of zero counts as holding.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    R = as_covariance(R)
    L = as_covariance(L, R.dim)
    lhs = L.min_eigenvalue
    rhs = gamma * R.max_eigenvalue
    margin = lhs - rhs
    tol = MARGIN_TOL * max(abs(lhs), abs(rhs), 1.0)
    return PredictabilityCheck(bool(margin >= -tol), float(margin))


def conservative_predictability(R, L):
    """Strict singular-value form: ``sigma_min(L) > sigma_max(R)``."""
    R = as_covariance(R)
    L = as_covariance(L, R.dim)
    return bool(np.min(np.abs(L.eigenvalues)) > np.max(np.abs(R.eigenvalues)))


def min_background_variance(gamma, sigma_obs_sq, N, lambda_min_QQT):
    """Smallest isotropic background variance keeping the predictability
    assumption: ``gamma * sigma_obs^4 / (N * lambda_min(Q Q^T))``."""
    if gamma < 0 or sigma_obs_sq <= 0 or N <= 0:
        raise ValueError("gamma, sigma_obs_sq and N must be positive")
    if not lambda_min_QQT >= GRAM_FLOOR:
        raise DegenerateGramMatrix(
            f"lambda_min(QQ^T)={lambda_min_QQT:g} below {GRAM_FLOOR:g}; bound diverges"
        )
    return gamma * sigma_obs_sq**2 / (N * lambda_min_QQT)
