"""Forward, tangent-linear and adjoint models.

``ModelSpec`` wraps an autonomous ODE ``dz/dt = f(z)`` advanced by classical
RK4. Its tangent and adjoint are the exact derivative (and transpose) of the
*discrete* RK4 map, so adjoint gradients agree with finite differences of the
discrete cost to round-off.

``LinearMapModel`` is a discrete linear map ``z -> A z`` with the same method
surface; it is used for closed-form oracles.

Tangent and adjoint steps accept a single vector of shape ``(n,)`` or a block
of column vectors ``(n, m)``.
"""
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .errors import DimensionMismatch, NonFinite

BLOWUP = 1e6


@dataclass
class CallCounter:
    step: int = 0
    tangent: int = 0
    adjoint: int = 0

    def reset(self):
        self.step = self.tangent = self.adjoint = 0


def _check_finite(z, index=None):
    if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > BLOWUP:
        where = "" if index is None else f" at step {index}"
        raise NonFinite(f"model state non-finite or beyond {BLOWUP:g}{where}", index)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    name: str
    dim: int
    rhs: Callable
    rhs_jacobian: Callable
    params: Mapping = field(default_factory=dict)
    dt: float = 0.01
    # Jacobian-vector / vector-Jacobian products; defaults go through the dense
    # Jacobian.
    rhs_jvp: Optional[Callable] = None
    rhs_vjp: Optional[Callable] = None
    counter: CallCounter = field(default_factory=CallCounter, compare=False)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    def jvp(self, z, dz):
        if self.rhs_jvp is not None:
            return self.rhs_jvp(z, dz)
        return self.rhs_jacobian(z) @ dz

    def vjp(self, z, lam):
        if self.rhs_vjp is not None:
            return self.rhs_vjp(z, lam)
        return self.rhs_jacobian(z).T @ lam

    def _stages(self, z):
        h = self.dt
        f = self.rhs
        k1 = f(z)
        z2 = z + 0.5 * h * k1
        k2 = f(z2)
        z3 = z + 0.5 * h * k2
        k3 = f(z3)
        z4 = z + h * k3
        k4 = f(z4)
        return (k1, k2, k3, k4), (z, z2, z3, z4)

    def step(self, z):
        self.counter.step += 1
        (k1, k2, k3, k4), _ = self._stages(z)
        return z + (self.dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def tangent_step(self, z, dz):
        self.counter.tangent += 1
        h = self.dt
        _, (z1, z2, z3, z4) = self._stages(z)
        d1 = self.jvp(z1, dz)
        d2 = self.jvp(z2, dz + 0.5 * h * d1)
        d3 = self.jvp(z3, dz + 0.5 * h * d2)
        d4 = self.jvp(z4, dz + h * d3)
        return dz + (h / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)

    def adjoint_step(self, z, lam):
        self.counter.adjoint += 1
        h = self.dt
        _, (z1, z2, z3, z4) = self._stages(z)
        # reverse sweep through the four stages
        a4 = (h / 6.0) * lam
        g4 = self.vjp(z4, a4)
        a3 = (h / 3.0) * lam + h * g4
        g3 = self.vjp(z3, a3)
        a2 = (h / 3.0) * lam + 0.5 * h * g3
        g2 = self.vjp(z2, a2)
        a1 = (h / 6.0) * lam + 0.5 * h * g2
        g1 = self.vjp(z1, a1)
        return lam + g1 + g2 + g3 + g4


@dataclass(frozen=True, eq=False)
class LinearMapModel:
    """Discrete linear dynamics ``z_{k+1} = A z_k``."""

    A: np.ndarray
    name: str = "linear_map"
    counter: CallCounter = field(default_factory=CallCounter, compare=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise DimensionMismatch("linear map must be square")
        object.__setattr__(self, "A", A)

    @property
    def dim(self):
        return self.A.shape[0]

    def step(self, z):
        self.counter.step += 1
        return self.A @ z

    def tangent_step(self, z, dz):
        self.counter.tangent += 1
        return self.A @ dz

    def adjoint_step(self, z, lam):
        self.counter.adjoint += 1
        return self.A.T @ lam


# --- concrete models -------------------------------------------------------

def lorenz63(sigma=10.0, rho=28.0, beta=8.0 / 3.0, dt=0.01):
    def rhs(z):
        x, y, w = z
        return np.array([sigma * (y - x), rho * x - y - x * w, x * y - beta * w])

    def jac(z):
        x, y, w = z
        return np.array([[-sigma, sigma, 0.0], [rho - w, -1.0, -x], [y, x, -beta]])

    def jvp(z, d):
        x, y, w = z
        return np.array([
            sigma * (d[1] - d[0]),
            (rho - w) * d[0] - d[1] - x * d[2],
            y * d[0] + x * d[1] - beta * d[2],
        ])

    def vjp(z, a):
        x, y, w = z
        return np.array([
            -sigma * a[0] + (rho - w) * a[1] + y * a[2],
            sigma * a[0] - a[1] + x * a[2],
            -x * a[1] - beta * a[2],
        ])

    return ModelSpec("lorenz63", 3, rhs, jac, {"sigma": sigma, "rho": rho, "beta": beta},
                     dt, jvp, vjp)


def lorenz96(K=40, F=8.0, dt=0.01):
    K = int(K)
    if K < 4:
        raise ValueError("Lorenz-96 needs K >= 4")

    # roll(x, s)[i] == x[(i - s) % K]; fancy indexing is much cheaper than np.roll
    i = np.arange(K)
    ip1, im1, im2, ip2 = (i + 1) % K, (i - 1) % K, (i - 2) % K, (i + 2) % K

    def rhs(z):
        return (z[ip1] - z[im2]) * z[im1] - z + F

    def jac(z):
        J = -np.eye(K)
        zm1 = z[im1]
        J[i, ip1] += zm1
        J[i, im2] -= zm1
        J[i, im1] += z[ip1] - z[im2]
        return J

    def jvp(z, d):
        zm1, c = z[im1], z[ip1] - z[im2]
        if d.ndim == 2:
            zm1, c = zm1[:, None], c[:, None]
        return (d[ip1] - d[im2]) * zm1 + c * d[im1] - d

    def vjp(z, a):
        # transpose of jvp: entry i feeds rows i-1 (via z_{i+1}), i+2 (via
        # z_{i-2}) and i+1 (via z_{i-1})
        zm1, c = z[im1], z[ip1] - z[im2]
        if a.ndim == 2:
            zm1, c = zm1[:, None], c[:, None]
        u = zm1 * a
        return u[im1] - u[ip2] + (c * a)[ip1] - a

    return ModelSpec("lorenz96", K, rhs, jac, {"F": F, "K": K}, dt, jvp, vjp)


def linear_ode(A, dt=0.01):
    """``dz/dt = A z`` integrated by RK4 (closed-form oracle for flow Jacobians)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return ModelSpec("linear_ode", A.shape[0], lambda z: A @ z, lambda z: A, {}, dt)


def make_model(name, dt=0.01, **params):
    if name == "lorenz63":
        return lorenz63(dt=dt, **params)
    if name == "lorenz96":
        return lorenz96(dt=dt, **params)
    raise ValueError(f"unknown model {name!r}")


# --- trajectory utilities --------------------------------------------------

@dataclass(frozen=True)
class TrajectorySegment:
    states: np.ndarray  # (steps + 1, n)
    dt: Optional[float] = None
    start_index: int = 0

    @property
    def last(self):
        return self.states[-1]

    def __len__(self):
        return self.states.shape[0]


def _as_state(model, z):
    z = np.asarray(z, dtype=float)
    if z.shape != (model.dim,):
        raise DimensionMismatch(f"state has shape {z.shape}, model dim is {model.dim}")
    return z


def step(model, z):
    out = model.step(_as_state(model, z))
    _check_finite(out, 1)
    return out


def propagate(model, z0, steps, start_index=0):
    if steps < 0:
        raise ValueError("steps must be >= 0")
    z = _as_state(model, z0)
    out = np.empty((steps + 1, model.dim))
    out[0] = z
    for k in range(steps):
        z = model.step(z)
        _check_finite(z, k + 1)
        out[k + 1] = z
    return TrajectorySegment(out, getattr(model, "dt", None), start_index)


def tangent_step(model, z, dz):
    z = _as_state(model, z)
    dz = np.asarray(dz, dtype=float)
    if dz.shape[0] != model.dim:
        raise DimensionMismatch("perturbation dimension mismatch")
    out = model.tangent_step(z, dz)
    if not np.all(np.isfinite(out)):
        raise NonFinite("tangent step produced non-finite values")
    return out


def adjoint_step(model, z, lam):
    z = _as_state(model, z)
    lam = np.asarray(lam, dtype=float)
    if lam.shape[0] != model.dim:
        raise DimensionMismatch("adjoint variable dimension mismatch")
    out = model.adjoint_step(z, lam)
    if not np.all(np.isfinite(out)):
        raise NonFinite("adjoint step produced non-finite values")
    return out


def flow_jacobians(model, z0, steps):
    """Return ``[M_{0:0}=I, M_{1:0}, ..., M_{steps:0}]`` along the trajectory from ``z0``.

    Built by pushing the identity block through the tangent model step by step.
    """
    z = _as_state(model, z0)
    P = np.eye(model.dim)
    out = [P]
    for k in range(steps):
        P = model.tangent_step(z, P)
        z = model.step(z)
        _check_finite(z, k + 1)
        if not np.all(np.isfinite(P)):
            raise NonFinite("flow Jacobian non-finite", k + 1)
        out.append(P)
    return out


def flow_jacobian(model, z0, steps):
    if steps < 1:
        raise ValueError("flow_jacobian needs steps >= 1")
    return flow_jacobians(model, z0, steps)[-1]


def finite_time_lyapunov(model, z0, steps):
    """Leading finite-time Lyapunov exponent over ``steps`` steps, with QR
    renormalisation every step to avoid overflow."""
    z = _as_state(model, z0)
    v = np.ones(model.dim) / np.sqrt(model.dim)
    total = 0.0
    for _ in range(steps):
        v = model.tangent_step(z, v)
        z = model.step(z)
        nv = np.linalg.norm(v)
        total += np.log(nv)
        v = v / nv
    return total / (steps * model.dt)
