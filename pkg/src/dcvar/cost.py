"""Window cost functions for standard, DC and DC-WME 4D-Var.

All quadratic forms carry a factor 1/2. The QoI at observation time ``t`` is
``H z_t`` with ``z_t`` the (nonlinear) model trajectory from the control
state, so the DC predictability residual compares it against the same
quantity along the background trajectory.
"""
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import dynamics
from .cov import CovarianceSpec, as_covariance, isotropic, make_covariance
from .errors import DimensionMismatch, NonFinite, NonSPD
from .observation import ObservationSet

VARIANTS = ("standard", "dc", "dc_wme")


@dataclass
class CostEvaluation:
    value: float
    gradient: Optional[np.ndarray] = None
    terms: dict = field(default_factory=dict)
    finite: bool = True

    @classmethod
    def infinite(cls, n=None):
        return cls(np.inf, None if n is None else np.full(n, np.nan),
                   {"background": np.inf, "misfit": np.inf, "predictability": 0.0}, False)


@dataclass(eq=False)
class WindowProblem:
    """One assimilation window.

    ``L`` is a list with one predicted covariance per observation time for
    ``dc`` and a single covariance of the observation dimension for
    ``dc_wme``; it must be ``None`` for ``standard``. ``R`` defaults to
    ``noise_std^2 I``. ``steps`` defaults to the last observation time.
    """

    model: object
    zb: np.ndarray
    B: CovarianceSpec
    obs: ObservationSet
    variant: str = "standard"
    L: Union[None, CovarianceSpec, Sequence[CovarianceSpec]] = None
    R: Optional[CovarianceSpec] = None
    steps: Optional[int] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        n = self.model.dim
        self.zb = np.asarray(self.zb, dtype=float)
        if self.zb.shape != (n,):
            raise DimensionMismatch("background dimension differs from model dimension")
        self.B = as_covariance(self.B, n)
        d = self.obs.operator.out_dim
        if self.obs.operator.n != n:
            raise DimensionMismatch("observation operator input dim differs from model dim")
        if self.R is None:
            self.R = isotropic(self.obs.noise_std**2, d)
        else:
            self.R = as_covariance(self.R, d)
        last = int(self.obs.times.max()) if len(self.obs) else 0
        if self.steps is None:
            self.steps = last
        elif self.steps < last:
            raise ValueError("window shorter than last observation time")
        if self.variant == "standard":
            if self.L is not None:
                raise ValueError("standard 4D-Var takes no predicted covariance")
        elif self.variant == "dc":
            if isinstance(self.L, CovarianceSpec) or self.L is None:
                raise ValueError("dc needs one predicted covariance per observation time")
            self.L = [as_covariance(x, d) for x in self.L]
            if len(self.L) != len(self.obs):
                raise ValueError("dc needs one predicted covariance per observation time")
        else:
            if self.L is None or isinstance(self.L, (list, tuple)):
                raise ValueError("dc_wme needs a single predicted covariance L_wme")
            self.L = as_covariance(self.L, d)
        self._Rinv_sqrt = self.R.inv_sqrt()
        self._bg_qoi = None

    @property
    def n_obs(self):
        return len(self.obs)

    def trajectory(self, z0):
        return dynamics.propagate(self.model, z0, self.steps).states

    def qoi(self, states):
        """``H z_t`` at every observation time, shape ``(K, d)``."""
        return states[self.obs.times][:, self.obs.operator.indices]

    def wme(self, qoi):
        K = self.n_obs
        if K == 0:
            return np.zeros(self.obs.operator.out_dim)
        resid = qoi - self.obs.values
        return (self._Rinv_sqrt @ resid.sum(axis=0)) / np.sqrt(K)

    @property
    def background_qoi(self):
        """QoI along the background trajectory (computed once)."""
        if self._bg_qoi is None:
            self._bg_qoi = self.qoi(self.trajectory(self.zb))
        return self._bg_qoi

    @property
    def background_wme(self):
        return self.wme(self.background_qoi)


def _background_term(p, z0):
    return 0.5 * p.B.mahalanobis_sq(z0 - p.zb)


def terms_from_states(p, z0, states):
    """Cost terms for a precomputed trajectory (shared with the adjoint)."""
    qoi = p.qoi(states)
    bg = _background_term(p, z0)
    if p.variant == "dc_wme":
        w = p.wme(qoi)
        misfit = 0.5 * float(w @ w)
        dq = w - p.background_wme
        pred = 0.5 * p.L.mahalanobis_sq(dq)
        return {"background": bg, "misfit": misfit, "predictability": pred}
    resid = qoi - p.obs.values
    misfit = 0.5 * sum(p.R.mahalanobis_sq(r) for r in resid)
    pred = 0.0
    if p.variant == "dc":
        q = qoi - p.background_qoi
        pred = 0.5 * sum(Lk.mahalanobis_sq(qk) for Lk, qk in zip(p.L, q))
    return {"background": bg, "misfit": misfit, "predictability": pred}


def _evaluate(p, z0):
    z0 = np.asarray(z0, dtype=float)
    try:
        states = p.trajectory(z0)
        # touch the background QoI so blow-up there is reported too
        if p.variant != "standard":
            p.background_qoi
    except NonFinite:
        return CostEvaluation.infinite()
    t = terms_from_states(p, z0, states)
    value = t["background"] + t["misfit"] - t["predictability"]
    return CostEvaluation(float(value), None, t, bool(np.isfinite(value)))


def _require(p, variant):
    if p.variant != variant:
        raise ValueError(f"problem variant is {p.variant!r}, expected {variant!r}")


def cost_standard(p, z0):
    _require(p, "standard")
    return _evaluate(p, z0)


def cost_dc(p, z0):
    _require(p, "dc")
    return _evaluate(p, z0)


def cost_dcwme(p, z0):
    _require(p, "dc_wme")
    return _evaluate(p, z0)


def evaluate(p, z0):
    """Cost of whichever variant ``p`` carries."""
    return _evaluate(p, z0)


def wme_map(p, z0):
    """Noise-whitened, sqrt(K)-normalised sum of observation residuals."""
    return p.wme(p.qoi(p.trajectory(z0)))


# --- predicted covariances -------------------------------------------------

def predicted_cov_wme(B, Q1_jacobian, sigma_obs, N):
    """``(N / sigma_obs^2) Q1 B Q1^T`` for the WME QoI."""
    if sigma_obs <= 0:
        raise ValueError("sigma_obs must be positive")
    Q1 = np.atleast_2d(np.asarray(Q1_jacobian, dtype=float))
    B = as_covariance(B, Q1.shape[1])
    L = (N / sigma_obs**2) * (Q1 @ B.apply(Q1.T))
    return make_covariance("dense", 0.5 * (L + L.T), allow_singular=True)


def _push_forward(B, J):
    L = J @ B.apply(J.T)
    return make_covariance("dense", 0.5 * (L + L.T), allow_singular=True)


def predicted_cov_k(B, op, model, z_ref, k):
    """``H M_{k:0} B M_{k:0}^T H^T`` with the flow Jacobian taken at ``z_ref``."""
    if k < 0:
        raise ValueError("k must be >= 0")
    B = as_covariance(B, model.dim)
    M = dynamics.flow_jacobians(model, z_ref, k)[-1]
    return _push_forward(B, M[op.indices])


def predicted_covs(B, op, model, z_ref, times):
    """``predicted_cov_k`` for every time in ``times`` from one tangent sweep."""
    times = np.asarray(times, dtype=int)
    B = as_covariance(B, model.dim)
    if times.size == 0:
        return []
    Ms = dynamics.flow_jacobians(model, z_ref, int(times.max()))
    return [_push_forward(B, Ms[t][op.indices]) for t in times]


def make_window(model, zb, B, obs, variant, R=None, steps=None, z_ref=None):
    """Assemble a :class:`WindowProblem`, deriving the predicted covariances
    at ``z_ref`` (default: the background) for the DC variants."""
    zb = np.asarray(zb, dtype=float)
    B = as_covariance(B, model.dim)
    z_ref = zb if z_ref is None else z_ref
    L = None
    if variant == "dc":
        L = predicted_covs(B, obs.operator, model, z_ref, obs.times)
    elif variant == "dc_wme":
        if len(obs) == 0:
            raise ValueError("dc_wme needs at least one observation")
        t1 = int(obs.times[0])
        M1 = dynamics.flow_jacobians(model, z_ref, t1)[-1]
        Q1 = M1[obs.operator.indices]
        Rspec = isotropic(obs.noise_std**2, obs.operator.out_dim) if R is None else as_covariance(R)
        if not Rspec.is_isotropic:
            raise ValueError("the WME predicted covariance assumes isotropic R")
        L = predicted_cov_wme(B, Q1, float(np.sqrt(Rspec.values[0])), len(obs))
    return WindowProblem(model, zb, B, obs, variant, L, R, steps)


# --- Hessian and updated covariance -----------------------------------------

def qoi_jacobians(p, z0):
    """``H M_{t:0}`` at each observation time, linearised along the trajectory from z0."""
    if p.n_obs == 0:
        return []
    Ms = dynamics.flow_jacobians(p.model, z0, int(p.obs.times.max()))
    idx = p.obs.operator.indices
    return [Ms[t][idx] for t in p.obs.times]


def wme_jacobian(p, z0):
    Js = qoi_jacobians(p, z0)
    if not Js:
        return np.zeros((p.obs.operator.out_dim, p.model.dim))
    return p._Rinv_sqrt @ sum(Js) / np.sqrt(len(Js))


def gauss_newton_hessian(p, z0):
    """``B^{-1} + sum_k J_k^T (R_k^{-1} - L_k^{-1}) J_k`` (``L^{-1} = 0`` for standard)."""
    z0 = np.asarray(z0, dtype=float)
    Hs = p.B.precision.copy()
    if p.n_obs == 0:
        return Hs
    if p.variant == "dc_wme":
        J = wme_jacobian(p, z0)
        W = np.eye(J.shape[0]) - p.L.precision
        return Hs + J.T @ W @ J
    for i, J in enumerate(qoi_jacobians(p, z0)):
        W = p.R.precision
        if p.variant == "dc":
            W = W - p.L[i].precision
        Hs += J.T @ W @ J
    return 0.5 * (Hs + Hs.T)


def updated_covariance(hessian):
    """Inverse of an SPD Hessian; raises :class:`NonSPD` otherwise."""
    h = make_covariance("dense", hessian)
    return make_covariance("dense", h.precision)


# --- linear-Gaussian oracle ---------------------------------------------------

def _precision_of(c, dim):
    if c is None:
        return np.zeros((dim, dim))
    return as_covariance(c, dim).precision


def mud_linear_oracle(zb, B, Q, y, R, L):
    """Minimiser of the linear DC objective from its normal equations.

    ``L=None`` stands for an infinite predicted covariance (zero precision).
    """
    zb = np.asarray(zb, dtype=float)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    y = np.asarray(y, dtype=float)
    n, d = zb.size, Q.shape[0]
    Binv = as_covariance(B, n).precision
    Rinv = as_covariance(R, d).precision
    Linv = _precision_of(L, d)
    psi_inv = Binv - Q.T @ Linv @ Q
    A = psi_inv + Q.T @ Rinv @ Q
    A = 0.5 * (A + A.T)
    lo = np.linalg.eigvalsh(A)[0]
    if lo <= 0:
        raise NonSPD(f"normal-equation matrix not SPD (min eigenvalue {lo:g})", lo)
    return np.linalg.solve(A, psi_inv @ zb + Q.T @ Rinv @ y)
