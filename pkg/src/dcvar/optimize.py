"""Limited-memory BFGS with a strong-Wolfe line search.

The objective is a callable ``z -> CostEvaluation`` (or ``(value, grad)``).
Non-finite trial values (trajectory blow-up) are treated as a failed
sufficient-decrease test, so the line search backs off into the region where
the model stays bounded.
"""
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .errors import NonFiniteAtStart

APPROX_WOLFE_EPS = 1e-12


@dataclass
class LbfgsOptions:
    memory: int = 10
    max_iters: int = 200
    grad_tol: float = 1e-8
    grad_tol_rel: float = 1e-10
    c1: float = 1e-4
    c2: float = 0.9
    max_line_search_steps: int = 40
    # optional stop on stalled relative cost decrease (0 disables); reported
    # as not converged
    ftol: float = 0.0

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if self.max_iters < 0 or self.max_line_search_steps < 1:
            raise ValueError("iteration limits must be positive")
        if not (self.grad_tol > 0 and self.grad_tol_rel > 0):
            raise ValueError("tolerances must be positive")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")


@dataclass
class OptimResult:
    z_opt: np.ndarray
    final_cost: float
    final_grad_norm: float
    iterations: int
    cost_evals: int
    converged: bool
    history: List[Tuple[float, float]] = field(default_factory=list)
    message: str = ""


def _unpack(out):
    if isinstance(out, tuple):
        f, g = out
    else:
        f, g = out.value, out.gradient
    f = float(f)
    if not np.isfinite(f) or g is None or not np.all(np.isfinite(g)):
        return np.inf, None
    return f, np.asarray(g, dtype=float)


def _interpolate(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi):
    """Cubic interpolation minimiser, safeguarded; bisection on bad data."""
    lo, hi = min(a_lo, a_hi), max(a_lo, a_hi)
    width = hi - lo
    mid = 0.5 * (a_lo + a_hi)
    if not (np.isfinite(f_hi) and d_hi is not None and np.isfinite(d_hi)):
        return mid
    d1 = d_lo + d_hi - 3 * (f_lo - f_hi) / (a_lo - a_hi)
    rad = d1 * d1 - d_lo * d_hi
    if rad < 0:
        return mid
    d2 = np.copysign(np.sqrt(rad), a_hi - a_lo)
    denom = d_hi - d_lo + 2 * d2
    if denom == 0:
        return mid
    a = a_hi - (a_hi - a_lo) * (d_hi + d2 - d1) / denom
    if not np.isfinite(a) or a < lo + 0.1 * width or a > hi - 0.1 * width:
        return mid
    return a


class _LineSearch:
    def __init__(self, fun, x, f0, g0, p, opts):
        self.fun, self.x, self.p, self.opts = fun, x, p, opts
        self.f0, self.d0 = f0, float(g0 @ p)
        self.evals = 0
        self.best = None  # (alpha, f, g) with the lowest Armijo-satisfying f

    def phi(self, a):
        self.evals += 1
        f, g = _unpack(self.fun(self.x + a * self.p))
        d = float(g @ self.p) if g is not None else None
        if (g is not None and self.sufficient(a, f, d)
                and (self.best is None or f < self.best[1])):
            self.best = (a, f, g)
        return f, g, d

    def armijo(self, a, f):
        return np.isfinite(f) and f <= self.f0 + self.opts.c1 * a * self.d0

    def sufficient(self, a, f, d):
        """Armijo, or its derivative form once cost differences reach round-off
        (approximate Wolfe condition of Hager and Zhang)."""
        if self.armijo(a, f):
            return True
        if not np.isfinite(f) or d is None:
            return False
        if f > self.f0 + APPROX_WOLFE_EPS * max(abs(self.f0), 1.0):
            return False
        return d <= (2 * self.opts.c1 - 1) * self.d0

    def curvature(self, d):
        return d is not None and abs(d) <= -self.opts.c2 * self.d0

    def search(self, a1):
        opts = self.opts
        a_prev, f_prev, d_prev = 0.0, self.f0, self.d0
        a = a1
        for i in range(opts.max_line_search_steps):
            f, g, d = self.phi(a)
            if not self.sufficient(a, f, d) or (i > 0 and f > f_prev):
                return self.zoom(a_prev, f_prev, d_prev, a, f, d)
            if self.curvature(d):
                return a, f, g
            if d >= 0:
                return self.zoom(a, f, d, a_prev, f_prev, d_prev)
            a_prev, f_prev, d_prev = a, f, d
            a = 2.0 * a
            if self.evals >= opts.max_line_search_steps:
                break
        return self.fallback()

    def zoom(self, a_lo, f_lo, d_lo, a_hi, f_hi, d_hi):
        while self.evals < self.opts.max_line_search_steps:
            a = _interpolate(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
            f, g, d = self.phi(a)
            if not self.sufficient(a, f, d) or f > f_lo:
                a_hi, f_hi, d_hi = a, f, d
            else:
                if self.curvature(d):
                    return a, f, g
                if d * (a_hi - a_lo) >= 0:
                    a_hi, f_hi, d_hi = a_lo, f_lo, d_lo
                a_lo, f_lo, d_lo = a, f, d
            if abs(a_hi - a_lo) <= 1e-16 * max(1.0, abs(a_lo)):
                break
        return self.fallback()

    def fallback(self):
        # out of budget: accept the best point satisfying sufficient decrease
        if self.best is not None:
            return self.best
        return None


def _two_loop(g, S, Y, rho):
    q = g.copy()
    alphas = []
    for s, y, r in zip(reversed(S), reversed(Y), reversed(rho)):
        a = r * (s @ q)
        alphas.append(a)
        q -= a * y
    if S:
        gamma = (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        q *= gamma
    for (s, y, r), a in zip(zip(S, Y, rho), reversed(alphas)):
        b = r * (y @ q)
        q += (a - b) * s
    return -q


def minimize(costgrad, z_init, opts=None):
    """Minimise ``costgrad`` from ``z_init``.

    The returned cost never exceeds the starting cost by more than
    ``APPROX_WOLFE_EPS * max(|f|, 1)`` (round-off tolerance of the line search).
    """
    opts = opts or LbfgsOptions()
    x = np.array(z_init, dtype=float)
    f, g = _unpack(costgrad(x))
    evals = 1
    if g is None:
        raise NonFiniteAtStart("objective is not finite at the initial point")
    gnorm = float(np.linalg.norm(g))
    tol = max(opts.grad_tol, opts.grad_tol_rel * gnorm)
    history = [(f, gnorm)]
    S, Y, rho = [], [], []
    it = 0
    message = "maximum iterations reached"
    converged = gnorm <= tol
    stalled = 0
    if converged:
        message = "gradient tolerance met"
    while not converged and it < opts.max_iters:
        p = _two_loop(g, S, Y, rho)
        if not p @ g < 0:
            S, Y, rho = [], [], []
            p = -g
        a1 = 1.0 if S else min(1.0, 1.0 / gnorm)
        ls = _LineSearch(costgrad, x, f, g, p, opts)
        res = ls.search(a1)
        evals += ls.evals
        if res is None:
            if S:
                # stale curvature information: retry once along steepest descent
                S, Y, rho = [], [], []
                continue
            message = "line search failed"
            break
        a, f_new, g_new = res
        s = a * p
        y = g_new - g
        x = x + s
        f_old, f, g = f, f_new, g_new
        gnorm = float(np.linalg.norm(g))
        it += 1
        history.append((f, gnorm))
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
            rho.append(1.0 / sy)
            if len(S) > opts.memory:
                S.pop(0)
                Y.pop(0)
                rho.pop(0)
        if gnorm <= tol:
            converged = True
            message = "gradient tolerance met"
            break
        # round-off floor: neither the cost nor the gradient improves any more
        stalled = stalled + 1 if f >= f_old and gnorm >= history[-2][1] else 0
        if stalled >= 3:
            message = "no further decrease at round-off level"
            break
        if opts.ftol > 0 and (f_old - f) <= opts.ftol * max(abs(f_old), abs(f), 1.0):
            message = "relative cost reduction below ftol"
            break
    return OptimResult(x, f, gnorm, it, evals, converged, history, message)
