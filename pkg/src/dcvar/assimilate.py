"""Cycled identical-twin experiments and their verification metrics.

A run alternates between a truth that keeps evolving and an assimilation
system that, at the start of every window, minimises the chosen cost from its
background and hands the analysis (propagated to the window end) to the next
window as its background.
"""
import csv
from dataclasses import asdict, dataclass, field, replace
import io
import json
import logging
import time
from typing import List, Optional, Sequence

import numpy as np

from . import adjoint, cost, dynamics, observation
from .cov import check_predictability, isotropic, ratio_precision
from .errors import CycleDiverged, NonFinite, NonFiniteAtStart
from .optimize import LbfgsOptions, minimize
from .rng import stream

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "truth_rmse_bg", "truth_rmse_an", "bias_bg", "bias_an")


@dataclass
class CycleConfig:
    variant: str = "dc_wme"
    model: str = "lorenz96"
    dof: int = 40
    forcing: float = 8.0
    dt: float = 0.01
    window_steps: int = 20
    obs_every: int = 4
    obs_offset: Optional[int] = None
    schedule: Optional[Sequence[int]] = None
    obs_operator: object = "alternating"
    n_cycles: int = 25
    sigma_obs: float = 1.0
    # background variance; None means 4 * sigma_obs^2
    alpha: Optional[float] = None
    gamma: float = 0.1
    seed: int = 0
    spinup_steps: int = 1000
    z0_true: Optional[Sequence[float]] = None
    z_init: Optional[Sequence[float]] = None
    on_diverge: str = "abort"
    lbfgs: LbfgsOptions = field(default_factory=lambda: LbfgsOptions(grad_tol_rel=1e-6))

    def __post_init__(self):
        if self.variant not in cost.VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.window_steps < 1 or self.n_cycles < 0:
            raise ValueError("window_steps must be >= 1 and n_cycles >= 0")
        if self.schedule is None and self.window_steps % self.obs_every:
            raise ValueError("window_steps must be divisible by obs_every "
                             "unless an explicit schedule is given")
        if self.sigma_obs < 0:
            raise ValueError("sigma_obs must be non-negative")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.on_diverge not in ("abort", "reset"):
            raise ValueError("on_diverge must be 'abort' or 'reset'")

    def build_model(self):
        if self.model == "lorenz63":
            return dynamics.lorenz63(dt=self.dt)
        return dynamics.make_model(self.model, dt=self.dt, K=self.dof, F=self.forcing)

    @property
    def effective_sigma(self):
        # noiseless runs still need a positive observation weight
        return self.sigma_obs if self.sigma_obs > 0 else 1.0

    @property
    def background_variance(self):
        return self.alpha if self.alpha is not None else 4.0 * self.effective_sigma**2

    def obs_times(self):
        if self.schedule is not None:
            t = np.asarray(sorted(self.schedule), dtype=int)
            if t.size and (t[0] < 0 or t[-1] > self.window_steps):
                raise ValueError("schedule entries must lie in [0, window_steps]")
            return t
        return observation.schedule(self.window_steps, self.obs_every, self.obs_offset)

    def to_dict(self):
        d = asdict(self)
        for k in ("schedule", "z0_true", "z_init"):
            if d[k] is not None:
                d[k] = [float(x) if k != "schedule" else int(x) for x in d[k]]
        if not isinstance(d["obs_operator"], str):
            d["obs_operator"] = [int(i) for i in d["obs_operator"]]
        return d


@dataclass
class CycleRecord:
    index: int
    zb: np.ndarray
    za: np.ndarray
    cost_background: float
    cost_analysis: float
    iterations: int
    cost_evals: int
    converged: bool
    predictability_holds: Optional[bool]
    predictability_margin: Optional[float]
    ratio_definiteness: Optional[str]
    obs: observation.ObservationSet
    misfit: float
    wall_time: float
    reset: bool = False


@dataclass
class AssimilationRun:
    config: CycleConfig
    steps: np.ndarray
    truth: np.ndarray
    background: np.ndarray
    analysis: np.ndarray
    cycles: List[CycleRecord]
    obs_steps: np.ndarray
    diverged_cycle: Optional[int] = None
    wall_time_s: float = 0.0

    @property
    def n_cycles(self):
        return len(self.cycles)

    @property
    def reset_cycles(self):
        return [c.index for c in self.cycles if c.reset]


def initial_truth(cfg, model):
    if cfg.z0_true is not None:
        return np.asarray(cfg.z0_true, dtype=float)
    rng = stream(cfg.seed, "truth")
    if cfg.model == "lorenz63":
        z = np.array([1.0, 1.0, 1.0]) + rng.standard_normal(3)
    else:
        z = cfg.forcing + 0.01 * rng.standard_normal(model.dim)
    return dynamics.propagate(model, z, cfg.spinup_steps).last


def initial_background(cfg, z_true):
    if cfg.z_init is not None:
        return np.asarray(cfg.z_init, dtype=float)
    rng = stream(cfg.seed, "background")
    return z_true + np.sqrt(cfg.background_variance) * rng.standard_normal(z_true.size)


def predictability_status(prob, gamma):
    """(holds, margin, W^{-1} definiteness) of a DC window; Nones for standard.

    The predicted covariance is compared with ``R = sigma_obs^2 I``; for dc
    the worst observation time is reported.
    """
    if prob.variant == "standard":
        return None, None, None
    Ls = [prob.L] if prob.variant == "dc_wme" else prob.L
    checks = [check_predictability(prob.R, L, gamma) for L in Ls]
    ratios = [ratio_precision(prob.R, L) for L in Ls]
    worst = min(range(len(checks)), key=lambda i: checks[i].margin)
    order = {"negative_definite": 0, "indefinite": 1, "positive_definite": 2}
    definiteness = min((r.definiteness for r in ratios), key=order.get)
    return all(c.holds for c in checks), checks[worst].margin, definiteness


def _misfit(obs, traj):
    if len(obs) == 0:
        return 0.0
    r = traj[obs.times][:, obs.operator.indices] - obs.values
    d = obs.operator.out_dim
    return float(np.mean(np.linalg.norm(r, axis=1) / np.sqrt(d)))


def run_cycles(cfg):
    """Run ``cfg.n_cycles`` assimilation windows; see :class:`AssimilationRun`."""
    t_start = time.perf_counter()
    model = cfg.build_model()
    n, W = model.dim, cfg.window_steps
    op = observation.make_operator(cfg.obs_operator, n)
    times = cfg.obs_times()
    B = isotropic(cfg.background_variance, n)
    R = isotropic(cfg.effective_sigma**2, op.out_dim)
    sigma_noise = cfg.sigma_obs

    T = W * cfg.n_cycles
    truth = np.empty((T, n))
    bg = np.empty((T, n))
    an = np.empty((T, n))
    records = []
    obs_steps = []
    diverged = None

    zt = initial_truth(cfg, model)
    zb = initial_background(cfg, zt)
    for c in range(cfg.n_cycles):
        t0 = time.perf_counter()
        rng = stream(cfg.seed, "noise", c)
        truth_seg, obs = observation.generate_twin_data(model, zt, times, op, sigma_noise,
                                                        rng, steps=W)
        reset = False
        try:
            prob = cost.make_window(model, zb, B, obs, cfg.variant, R=R, steps=W)
            status = predictability_status(prob, cfg.gamma)
            res = minimize(adjoint.costgrad(prob), zb, cfg.lbfgs)
            an_seg = dynamics.propagate(model, res.z_opt, W).states
            bg_seg = dynamics.propagate(model, zb, W).states
        except (NonFinite, NonFiniteAtStart) as exc:
            log.warning("cycle %d diverged: %s", c, exc)
            if cfg.on_diverge == "abort":
                diverged = c
                T = W * c
                break
            # restart the assimilation system from the truth; flagged in the record
            reset = True
            prob = None
            status = (None, None, None)
            res = None
            an_seg = truth_seg.states
            bg_seg = truth_seg.states
        sl = slice(c * W, (c + 1) * W)
        truth[sl] = truth_seg.states[:W]
        bg[sl] = bg_seg[:W]
        an[sl] = an_seg[:W]
        obs_steps.extend(c * W + t for t in obs.times if t < W)
        cost_bg = cost.evaluate(prob, zb).value if prob is not None else np.nan
        records.append(CycleRecord(
            index=c, zb=zb.copy(), za=an_seg[0].copy(),
            cost_background=cost_bg,
            cost_analysis=res.final_cost if res is not None else np.nan,
            iterations=res.iterations if res is not None else 0,
            cost_evals=res.cost_evals if res is not None else 0,
            converged=res.converged if res is not None else False,
            predictability_holds=status[0], predictability_margin=status[1],
            ratio_definiteness=status[2], obs=obs, misfit=_misfit(obs, an_seg),
            wall_time=time.perf_counter() - t0, reset=reset))
        zb = an_seg[W].copy()
        zt = truth_seg.states[W].copy()
    steps = np.arange(T)
    run = AssimilationRun(cfg, steps, truth[:T], bg[:T], an[:T], records,
                          np.asarray(obs_steps, dtype=int), diverged,
                          time.perf_counter() - t_start)
    return run


def run_or_raise(cfg):
    """Like :func:`run_cycles` but raises :class:`CycleDiverged` on abort."""
    run = run_cycles(cfg)
    if run.diverged_cycle is not None:
        raise CycleDiverged(f"cycle {run.diverged_cycle} diverged", run.diverged_cycle)
    return run


# --- metrics -------------------------------------------------------------------

def _field(run, which):
    if which == "analysis":
        return run.analysis
    if which == "background":
        return run.background
    raise ValueError("field must be 'analysis' or 'background'")


def rmse_series(run, field="analysis"):
    """Per-step RMSE against the truth and its time average."""
    err = _field(run, field) - run.truth
    series = np.sqrt(np.mean(err**2, axis=1))
    avg = float(series.mean()) if series.size else float("nan")
    return series, avg


def rmse_at_obs_instants(run, field="analysis"):
    series, _ = rmse_series(run, field)
    if run.obs_steps.size == 0:
        return float("nan")
    return float(series[run.obs_steps].mean())


def bias_series(run, field="analysis"):
    return np.mean(_field(run, field) - run.truth, axis=1)


def normalized_bias(run, field="analysis"):
    """``(b / ||b||_inf, ||b||_inf)``; an all-zero series returns zeros and 0."""
    b = bias_series(run, field)
    norm = float(np.max(np.abs(b))) if b.size else 0.0
    if norm == 0.0:
        return np.zeros_like(b), 0.0
    return b / norm, norm


def data_misfit(run):
    """Per-cycle misfit and the mean over all observation instants."""
    per_cycle = np.array([c.misfit for c in run.cycles])
    weights = np.array([len(c.obs) for c in run.cycles], dtype=float)
    total = float(np.sum(per_cycle * weights) / weights.sum()) if weights.sum() else 0.0
    return per_cycle, total


# --- serialisation ---------------------------------------------------------------

def metrics_csv(run):
    rb, _ = rmse_series(run, "background")
    ra, _ = rmse_series(run, "analysis")
    bb = bias_series(run, "background")
    ba = bias_series(run, "analysis")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for i, step in enumerate(run.steps):
        w.writerow([int(step), repr(float(rb[i])), repr(float(ra[i])),
                    repr(float(bb[i])), repr(float(ba[i]))])
    return buf.getvalue()


def summary(run):
    _, avg_an = rmse_series(run, "analysis")
    _, avg_bg = rmse_series(run, "background")
    _, max_bias = normalized_bias(run, "analysis")
    _, max_bias_bg = normalized_bias(run, "background")
    _, misfit = data_misfit(run)
    holds = [c.predictability_holds for c in run.cycles if c.predictability_holds is not None]
    return {
        "config": run.config.to_dict(),
        "variant": run.config.variant,
        "time_avg_rmse": avg_an,
        "time_avg_rmse_background": avg_bg,
        "obs_instant_rmse": rmse_at_obs_instants(run, "analysis"),
        "max_bias": max_bias,
        "max_bias_background": max_bias_bg,
        "total_misfit": misfit,
        "misfit_definition": "mean over observation instants of ||H z_a - y|| / sqrt(d)",
        "n_cycles": run.n_cycles,
        "diverged_cycle": run.diverged_cycle,
        "reset_cycles": run.reset_cycles,
        "predictability_violations": int(sum(1 for h in holds if not h)),
        "converged_cycles": int(sum(c.converged for c in run.cycles)),
        "wall_time_s": run.wall_time_s,
    }


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def summary_json(run):
    return json.dumps(summary(run), indent=2, sort_keys=True, default=_json_default) + "\n"


def with_variant(cfg, variant):
    return replace(cfg, variant=variant)
