"""Linear selection observation operators and synthetic twin data."""
import csv
from dataclasses import dataclass

import numpy as np

from .dynamics import propagate
from .errors import DimensionMismatch
from .rng import as_generator


@dataclass(frozen=True, eq=False)
class ObservationOperator:
    """Selects ``indices`` out of an ``n``-dimensional state."""

    indices: np.ndarray
    n: int
    kind: str = "index_subset"

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=int).ravel()
        if idx.size == 0:
            raise ValueError("observation operator needs at least one index")
        if np.any(np.diff(idx) <= 0):
            raise ValueError("observation indices must be strictly increasing")
        if idx[0] < 0 or idx[-1] >= self.n:
            raise DimensionMismatch(f"observation indices out of range for n={self.n}")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def out_dim(self):
        return self.indices.size

    @property
    def matrix(self):
        H = np.zeros((self.out_dim, self.n))
        H[np.arange(self.out_dim), self.indices] = 1.0
        return H

    def apply(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape[0] != self.n:
            raise DimensionMismatch(f"state dim {z.shape[0]} != operator input dim {self.n}")
        return z[self.indices]

    def adjoint_apply(self, w):
        w = np.asarray(w, dtype=float)
        if w.shape[0] != self.out_dim:
            raise DimensionMismatch("observation vector has wrong length")
        out = np.zeros((self.n,) + w.shape[1:])
        out[self.indices] = w
        return out


def full(n):
    return ObservationOperator(np.arange(n), n, "full")


def alternating(n, parity=0):
    """Every other component, starting at ``parity`` (0 -> even indices)."""
    return ObservationOperator(np.arange(parity, n, 2), n, "alternating")


def index_subset(n, indices):
    return ObservationOperator(np.asarray(sorted(indices)), n, "index_subset")


def make_operator(spec, n):
    """Build an operator from a config value: "full", "alternating",
    "alternating_odd", "first_two" or an explicit list of indices."""
    if isinstance(spec, str):
        if spec == "full":
            return full(n)
        if spec == "alternating":
            return alternating(n, 0)
        if spec == "alternating_odd":
            return alternating(n, 1)
        if spec == "first_two":
            return index_subset(n, [0, 1])
        raise ValueError(f"unknown observation operator {spec!r}")
    return index_subset(n, list(spec))


def apply(op, z):
    return op.apply(z)


def adjoint_apply(op, w):
    return op.adjoint_apply(w)


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Observations ``values[i]`` taken at window step ``times[i]``."""

    times: np.ndarray
    values: np.ndarray
    operator: ObservationOperator
    noise_std: float

    def __post_init__(self):
        t = np.asarray(self.times, dtype=int).ravel()
        v = np.asarray(self.values, dtype=float).reshape(t.size, -1) if t.size else \
            np.zeros((0, self.operator.out_dim))
        if t.size and np.any(np.diff(t) <= 0):
            raise ValueError("observation times must be sorted and unique")
        if t.size and t[0] < 0:
            raise ValueError("observation times must be non-negative")
        if v.shape[1] != self.operator.out_dim:
            raise DimensionMismatch("observation values do not match operator output dim")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.times.size

    def to_csv(self, path, step_offset=0):
        with open(path, "w", newline="") as fh:
            write_csv(fh, self, step_offset)


def write_csv(fh, obs, step_offset=0):
    w = csv.writer(fh)
    w.writerow(["step", "obs_index", "value"])
    for t, row in zip(obs.times, obs.values):
        for j, val in zip(obs.operator.indices, row):
            w.writerow([int(t) + step_offset, int(j), repr(float(val))])


def read_csv(path, n, noise_std, step_offset=0):
    """Inverse of :meth:`ObservationSet.to_csv` for a fixed observed index set."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError("empty observation file")
    steps = sorted({int(r["step"]) for r in rows})
    idx = sorted({int(r["obs_index"]) for r in rows})
    pos = {j: i for i, j in enumerate(idx)}
    vals = np.full((len(steps), len(idx)), np.nan)
    tpos = {s: i for i, s in enumerate(steps)}
    for r in rows:
        vals[tpos[int(r["step"])], pos[int(r["obs_index"])]] = float(r["value"])
    if np.isnan(vals).any():
        raise ValueError("observation file does not observe the same components at every step")
    op = index_subset(n, idx)
    return ObservationSet(np.array(steps) - step_offset, vals, op, noise_std)


def schedule(window_steps, obs_every, offset=None):
    """Observation steps inside a window: ``offset, offset+obs_every, ... <= window_steps``.

    The default offset is ``obs_every`` (no observation at the window start).
    """
    if obs_every < 1:
        raise ValueError("obs_every must be >= 1")
    first = obs_every if offset is None else offset
    return np.arange(first, window_steps + 1, obs_every)


def generate_twin_data(model, z0_true, times, op, sigma_obs, seed=None, steps=None):
    """Truth trajectory from ``z0_true`` and noisy observations of it.

    ``y_k = H z_k + eps_k`` with ``eps_k ~ N(0, sigma_obs^2 I)``. ``seed`` may
    be an int or a ``numpy.random.Generator``.
    """
    if sigma_obs < 0:
        raise ValueError("sigma_obs must be non-negative")
    times = np.asarray(times, dtype=int)
    if steps is None:
        steps = int(times.max()) if times.size else 0
    if times.size and (times.min() < 0 or times.max() > steps):
        raise ValueError("observation times outside the trajectory")
    truth = propagate(model, z0_true, steps)
    rng = as_generator(seed, "noise")
    clean = truth.states[times][:, op.indices]
    noise = rng.standard_normal(clean.shape)
    values = clean + sigma_obs * noise if sigma_obs > 0 else clean.copy()
    return truth, ObservationSet(times, values, op, float(sigma_obs))
