"""Adjoint gradients of the window costs and a finite-difference checker.

Every gradient is one forward sweep (trajectory stored, no checkpointing)
followed by one backward sweep of the discrete adjoint. Observation times
inject a forcing term into the costate:

* standard: ``H^T R^{-1} (H z_t - y_t)``
* dc:       ``H^T [R^{-1} (H z_t - y_t) - L_t^{-1} (H z_t - H z^b_t)]``
* dc_wme:   ``H^T R^{-1/2} s / sqrt(K)`` with the shared sensitivity
  ``s = Q_wme - L_wme^{-1} (Q_wme - Q_wme^b)``

and the gradient is ``B^{-1}(z0 - zb) + lambda_0``. With residuals defined as
model-minus-data, the costate already carries the sign of the observation
terms, so ``lambda_0`` is added (a subtraction fails the finite-difference
check).
"""
from dataclasses import dataclass

import numpy as np

from .cost import CostEvaluation, terms_from_states
from .errors import NonFinite

DEFAULT_EPS = (1e-4, 1e-5, 1e-6)


@dataclass
class AdjointState:
    lambdas: np.ndarray  # (steps + 1, n) costates
    states: np.ndarray  # stored forward trajectory


def _forcings(p, states):
    op = p.obs.operator
    qoi = p.qoi(states)
    out = {}
    if p.variant == "dc_wme":
        K = p.n_obs
        w = p.wme(qoi)
        s = w - p.L.apply_precision(w - p.background_wme)
        f = op.adjoint_apply(p._Rinv_sqrt.T @ s / np.sqrt(K))
        for t in p.obs.times:
            out[int(t)] = f
        return out
    resid = qoi - p.obs.values
    if p.variant == "dc":
        q = qoi - p.background_qoi
    for i, t in enumerate(p.obs.times):
        v = p.R.apply_precision(resid[i])
        if p.variant == "dc":
            v = v - p.L[i].apply_precision(q[i])
        out[int(t)] = op.adjoint_apply(v)
    return out


def backward_sweep(p, states, keep=False):
    """Run the adjoint recursion; returns ``lambda_0`` (or all costates)."""
    model = p.model
    forcing = _forcings(p, states)
    n = model.dim
    lam = np.zeros(n)
    last = max(forcing) if forcing else -1
    lambdas = np.zeros((p.steps + 1, n)) if keep else None
    for k in range(last, -1, -1):
        if k < last:
            lam = model.adjoint_step(states[k], lam)
        f = forcing.get(k)
        if f is not None:
            lam = lam + f
        if keep:
            lambdas[k] = lam
    if not np.all(np.isfinite(lam)):
        raise NonFinite("adjoint sweep produced non-finite values")
    return lambdas if keep else lam


def _value_and_gradient(p, z0):
    z0 = np.asarray(z0, dtype=float)
    try:
        states = p.trajectory(z0)
        if p.variant != "standard":
            p.background_qoi
        lam0 = backward_sweep(p, states)
    except NonFinite:
        return CostEvaluation.infinite(p.model.dim)
    terms = terms_from_states(p, z0, states)
    value = terms["background"] + terms["misfit"] - terms["predictability"]
    grad = p.B.apply_precision(z0 - p.zb) + lam0
    return CostEvaluation(float(value), grad, terms, bool(np.isfinite(value)))


def _require(p, variant):
    if p.variant != variant:
        raise ValueError(f"problem variant is {p.variant!r}, expected {variant!r}")


def grad_standard(p, z0):
    _require(p, "standard")
    return _value_and_gradient(p, z0)


def grad_dc(p, z0):
    _require(p, "dc")
    return _value_and_gradient(p, z0)


def grad_dcwme(p, z0):
    _require(p, "dc_wme")
    return _value_and_gradient(p, z0)


def gradient(p, z0):
    return _value_and_gradient(p, z0)


def adjoint_state(p, z0):
    states = p.trajectory(np.asarray(z0, dtype=float))
    return AdjointState(backward_sweep(p, states, keep=True), states)


def costgrad(p):
    """Closure ``z -> CostEvaluation`` suitable for :func:`dcvar.optimize.minimize`."""
    return lambda z: _value_and_gradient(p, z)


# --- finite-difference verification -----------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_component: np.ndarray
    best_eps: float
    errors_by_eps: dict
    nan_flag: bool = False

    def passed(self, tol):
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < tol)


def _value(costfn, z):
    out = costfn(z)
    return float(getattr(out, "value", out))


def fd_gradient(costfn, z0, eps):
    z0 = np.asarray(z0, dtype=float)
    g = np.empty_like(z0)
    for i in range(z0.size):
        e = np.zeros_like(z0)
        e[i] = eps
        g[i] = (_value(costfn, z0 + e) - _value(costfn, z0 - e)) / (2 * eps)
    return g


def fd_gradient_check(costfn, z0, eps_list=DEFAULT_EPS, grad=None):
    """Compare ``grad`` (default: ``costfn(z0).gradient``) with central differences.

    The error at each step size is ``||fd - grad||_inf / ||fd||_inf``; the
    report keeps the best step size.
    """
    eps_list = tuple(eps_list)
    if not eps_list or any(e <= 0 for e in eps_list):
        raise ValueError("eps_list must be non-empty and positive")
    z0 = np.asarray(z0, dtype=float)
    if grad is None:
        grad = costfn(z0).gradient
    grad = np.asarray(grad, dtype=float)
    errors, comps = {}, {}
    for eps in eps_list:
        fd = fd_gradient(costfn, z0, eps)
        scale = np.max(np.abs(fd))
        if not scale > 0:
            scale = max(np.max(np.abs(grad)), np.finfo(float).tiny)
        diff = np.abs(fd - grad) / scale
        comps[eps] = diff
        errors[eps] = float(np.max(diff)) if np.all(np.isfinite(diff)) else np.nan
    finite = {e: v for e, v in errors.items() if np.isfinite(v)}
    if not finite:
        return GradCheckReport(np.nan, np.full(z0.size, np.nan), np.nan, errors, True)
    best = min(finite, key=finite.get)
    return GradCheckReport(finite[best], comps[best], best, errors,
                           len(finite) < len(errors))


def directional_check(costfn, z0, grad, direction, eps=1e-6):
    """Relative gap between ``<grad, d>`` and its central-difference estimate."""
    z0 = np.asarray(z0, dtype=float)
    d = np.asarray(direction, dtype=float)
    fd = (_value(costfn, z0 + eps * d) - _value(costfn, z0 - eps * d)) / (2 * eps)
    an = float(np.dot(grad, d))
    return abs(fd - an) / max(abs(fd), abs(an), np.finfo(float).tiny)
