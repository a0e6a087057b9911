"""Monte Carlo diagnostics: the background-variance lower bound and E[r].

``estimate_sigma_b_bound`` samples initial conditions, integrates the
tangent model over a fixed horizon and converts the smallest eigenvalue of
``Q Q^T`` (``Q = H M``) into the minimal isotropic background variance.

``expected_ratio`` checks the unit-mean property of the ratio
``r = pi_obs / pi_pred`` evaluated on push-forward samples, in the
linear-Gaussian setting where ``pi_pred`` is known exactly.
"""
from dataclasses import dataclass, field
import logging
from typing import Optional

import numpy as np

from . import dynamics
from .cov import CovarianceSpec, as_covariance, make_covariance, min_background_variance
from .errors import DegenerateGramMatrix, NonFinite
from .rng import stream

log = logging.getLogger(__name__)

BOUND_CSV_COLUMNS = ("trajectory_id", "lambda_min", "bound")


@dataclass
class BoundEstimate:
    samples: np.ndarray
    lambda_min: np.ndarray
    trajectory_ids: np.ndarray
    config: dict
    excluded: int = 0

    @property
    def mean(self):
        return float(np.mean(self.samples)) if self.samples.size else float("nan")

    @property
    def std_error(self):
        m = self.samples.size
        if m < 2:
            return float("nan")
        return float(np.std(self.samples, ddof=1) / np.sqrt(m))

    def confidence_interval(self, z=1.96):
        se = self.std_error
        return self.mean - z * se, self.mean + z * se

    def to_csv(self):
        lines = [",".join(BOUND_CSV_COLUMNS)]
        for i, lam, b in zip(self.trajectory_ids, self.lambda_min, self.samples):
            lines.append(f"{int(i)},{float(lam)!r},{float(b)!r}")
        return "\n".join(lines) + "\n"

    def summary(self):
        lo, hi = self.confidence_interval()
        return {
            "config": self.config,
            "mean": self.mean,
            "std_error": self.std_error,
            "ci95": [lo, hi],
            "n_samples": int(self.samples.size),
            "excluded": int(self.excluded),
            "min": float(self.samples.min()) if self.samples.size else None,
            "max": float(self.samples.max()) if self.samples.size else None,
        }


def _sample_initial(model, rng, box, spinup_steps):
    lo, hi = box
    z = rng.uniform(lo, hi, size=model.dim)
    return dynamics.propagate(model, z, spinup_steps).last


def estimate_sigma_b_bound(model, op, gamma, sigma_obs_sq, N, t_integrate=10.0,
                           n_traj=50, seed=0, box=(-10.0, 10.0), t_spinup=5.0,
                           initial_states=None) -> BoundEstimate:
    """Per-trajectory ``gamma sigma^4 / (N lambda_min(Q Q^T))`` with ``Q = H M_{t:0}``.

    Each trajectory ``i`` draws its initial condition from its own stream
    ``(seed, "bound", i)``, so results do not depend on evaluation order.
    Degenerate Gram matrices (and blow-ups) are excluded and counted.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    if t_integrate <= 0:
        raise ValueError("t_integrate must be positive")
    steps = max(1, int(round(t_integrate / model.dt)))
    spin = int(round(t_spinup / model.dt))
    H = op.matrix
    ids, lams, bounds = [], [], []
    excluded = 0
    for i in range(n_traj):
        if initial_states is not None:
            z0 = np.asarray(initial_states[i], dtype=float)
        else:
            z0 = _sample_initial(model, stream(seed, "bound", i), box, spin)
        try:
            M = dynamics.flow_jacobian(model, z0, steps)
            Q = H @ M
            lam = float(np.linalg.eigvalsh(Q @ Q.T)[0])
            b = min_background_variance(gamma, sigma_obs_sq, N, lam)
        except (DegenerateGramMatrix, NonFinite) as exc:
            log.info("trajectory %d excluded: %s", i, exc)
            excluded += 1
            continue
        ids.append(i)
        lams.append(lam)
        bounds.append(b)
    config = {"gamma": gamma, "sigma_obs_sq": sigma_obs_sq, "N": N,
              "t_integrate": t_integrate, "n_traj": n_traj, "seed": seed,
              "box": list(box), "t_spinup": t_spinup, "dt": model.dt}
    return BoundEstimate(np.asarray(bounds), np.asarray(lams),
                         np.asarray(ids, dtype=int), config, excluded)


@dataclass(frozen=True, eq=False)
class GaussianDensity:
    mean: np.ndarray
    cov: CovarianceSpec = field(default=None)

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", as_covariance(self.cov, m.size))

    @property
    def dim(self):
        return self.mean.size

    def logpdf(self, x):
        """Log density at ``x`` (shape ``(d,)`` or ``(m, d)``)."""
        x = np.asarray(x, dtype=float)
        d = x - self.mean
        P = self.cov.precision
        quad = np.einsum("...i,ij,...j->...", d, P, d)
        logdet = float(np.sum(np.log(self.cov.eigenvalues)))
        return -0.5 * (quad + logdet + self.dim * np.log(2 * np.pi))

    def sample(self, rng, size):
        L = np.linalg.cholesky(self.cov.matrix)
        return self.mean + rng.standard_normal((size, self.dim)) @ L.T


def push_forward(init: GaussianDensity, Q) -> GaussianDensity:
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    C = Q @ init.cov.matrix @ Q.T
    return GaussianDensity(Q @ init.mean, make_covariance("dense", 0.5 * (C + C.T)))


@dataclass
class RatioEstimate:
    value: float
    std_error: float
    violated: bool
    n_samples: int
    threshold: float = 4.0

    def __float__(self):
        return self.value


def expected_ratio(init: GaussianDensity, Q, obs: GaussianDensity, n_samples=100_000,
                   seed=0, threshold=4.0, rng: Optional[np.random.Generator] = None):
    """Monte Carlo mean of ``pi_obs(Q z) / pi_pred(Q z)`` for ``z ~ init``.

    ``violated`` is set when the estimate is more than ``threshold`` standard
    errors from one (or the ratio is not finite).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    pred = push_forward(init, Q)
    if pred.dim != obs.dim:
        raise ValueError("observed density dimension differs from Q output")
    rng = rng or stream(seed, "ratio")
    z = init.sample(rng, n_samples)
    q = z @ np.atleast_2d(Q).T
    logr = obs.logpdf(q) - pred.logpdf(q)
    if (np.array_equal(obs.mean, pred.mean)
            and np.array_equal(obs.cov.matrix, pred.cov.matrix)):
        logr = np.zeros(n_samples)  # identical densities: r is exactly one
    r = np.exp(logr)
    value = float(np.mean(r))
    se = float(np.std(r, ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    if not np.isfinite(value):
        violated = True
    elif se == 0.0:
        violated = value != 1.0
    else:
        violated = abs(value - 1.0) > threshold * se
    return RatioEstimate(value, se, bool(violated), n_samples, threshold)
