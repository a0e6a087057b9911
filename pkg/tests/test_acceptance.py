"""Acceptance criteria, each checked at its stated tolerance and runtime budget.

Every test prints one ``CRITERION n: PASS|FAIL`` line (visible under
``pytest -v``) and then asserts the same outcome.  Criterion 11 has no
executable check: the shallow-water experiment is out of scope.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from dcvar import adjoint
from dcvar.assimilate import normalized_bias, rmse_series, run_cycles
from dcvar.config import load
from dcvar.cost import evaluate, gauss_newton_hessian, mud_linear_oracle
from dcvar.cov import isotropic
from dcvar.diagnostics import GaussianDensity, estimate_sigma_b_bound, expected_ratio, push_forward
from dcvar.dynamics import linear_ode, lorenz63, lorenz96
from dcvar.observation import alternating, full, index_subset
from dcvar.optimize import LbfgsOptions, minimize

from linear_problems import linear_window
from test_adjoint import nonlinear_window

pytestmark = pytest.mark.slow

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SEEDS = range(10)


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {n}: {detail}"


def time_avg_rmse(cfg):
    run = run_cycles(cfg)
    if run.diverged_cycle is not None:
        return np.inf
    return rmse_series(run)[1]


def test_c1_gradient_correctness(capsys):
    t0 = time.perf_counter()
    worst = {}
    for variant in ("standard", "dc", "dc_wme"):
        for label, args in (("l63", (lorenz63(), full(3), 10, 2)),
                            ("l96", (lorenz96(12), alternating(12), 20, 4))):
            p, z0 = nonlinear_window(*args, variant)
            rep = adjoint.fd_gradient_check(lambda z: evaluate(p, z), z0,
                                            grad=adjoint.gradient(p, z0).gradient)
            worst[f"{label}/{variant}"] = rep.max_rel_error
    rng = np.random.default_rng(0)
    lin = 0.0
    for variant in ("standard", "dc", "dc_wme"):
        for _ in range(5):
            p, _ = linear_window(rng, variant, times=(1, 2, 3))
            z = rng.standard_normal(4)
            rep = adjoint.fd_gradient_check(lambda z_: evaluate(p, z_), z,
                                            grad=adjoint.gradient(p, z).gradient)
            lin = max(lin, rep.max_rel_error)
    elapsed = time.perf_counter() - t0
    nl = max(worst.values())
    ok = nl < 1e-5 and lin < 1e-9 and elapsed < 10
    report(capsys, 1, ok, f"nonlinear max rel err {nl:.2e} (<1e-5), linear {lin:.2e} (<1e-9), "
                          f"{elapsed:.1f}s (<10s)")


def test_c2_mud_oracle(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    opts = LbfgsOptions(grad_tol=1e-12, grad_tol_rel=1e-15, max_iters=500)
    worst = 0.0
    for i in range(20):
        observed = None if i % 2 == 0 else sorted(rng.choice(4, 2, replace=False).tolist())
        t = int(rng.integers(1, 4))
        p, A = linear_window(rng, "dc", times=(t,), observed=observed)
        Q = np.linalg.matrix_power(A, t)[p.obs.operator.indices]
        z_star = mud_linear_oracle(p.zb, p.B, Q, p.obs.values[0], p.R, p.L[0])
        res = minimize(adjoint.costgrad(p), p.zb, opts)
        worst = max(worst, float(np.max(np.abs(res.z_opt - z_star))))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8 and elapsed < 5
    report(capsys, 2, ok, f"max inf-norm gap {worst:.2e} (<1e-8) over 20 problems, "
                          f"{elapsed:.1f}s (<5s)")


def test_c3_convexity_uniqueness(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    opts = LbfgsOptions(grad_tol=1e-12, grad_tol_rel=1e-15, max_iters=500)
    min_eig, spread = np.inf, 0.0
    for variant in ("dc", "dc_wme"):
        for _ in range(5):
            p, _ = linear_window(rng, variant, times=(1, 2))
            for _ in range(20):
                H = gauss_newton_hessian(p, 3 * rng.standard_normal(4))
                min_eig = min(min_eig, float(np.linalg.eigvalsh(H)[0]))
            sols = np.array([minimize(adjoint.costgrad(p), 5 * rng.standard_normal(4), opts).z_opt
                             for _ in range(10)])
            spread = max(spread, float(np.max(np.abs(sols - sols[0]))))
    elapsed = time.perf_counter() - t0
    ok = min_eig > 0 and spread < 1e-6 and elapsed < 10
    report(capsys, 3, ok, f"min Hessian eigenvalue {min_eig:.3g} (>0), minimiser spread "
                          f"{spread:.2e} (<1e-6), {elapsed:.1f}s (<10s)")


def test_c4_predictability_bound(capsys):
    t0 = time.perf_counter()
    cfg = load(CONFIGS / "l63_bound.toml")
    b = cfg.section("bound")
    est = estimate_sigma_b_bound(lorenz63(), index_subset(3, b["observed"]), b["gamma"],
                                 b["sigma_obs_sq"], b["N"], b["t_integrate"], b["n_traj"],
                                 cfg.seed, tuple(b["box"]), b["t_spinup"])
    lin = estimate_sigma_b_bound(linear_ode(np.zeros((3, 3))), full(3), 0.1, 4.0, 5,
                                 t_integrate=10.0, n_traj=3)
    exact = bool(np.all(lin.samples == 0.1 * 4.0**2 / 5))
    elapsed = time.perf_counter() - t0
    ok = 8 <= est.mean <= 30 and exact and elapsed < 30
    report(capsys, 4, ok, f"sample mean {est.mean:.4g} (band [8, 30]; median "
                          f"{np.median(est.samples):.3g}, {est.samples.size} samples, "
                          f"{est.excluded} excluded), linear closed form exact={exact}, "
                          f"{elapsed:.1f}s (<30s)")


def test_c5_noise_ordering(capsys):
    t0 = time.perf_counter()
    cfg = load(CONFIGS / "l63_noise_sweep.toml")
    wins = {}
    for sigma in (1.5, 2.0, 2.5, 3.0):
        n = 0
        for s in SEEDS:
            std = time_avg_rmse(cfg.cycle_config("standard", seed=s, sigma_obs=sigma))
            wme = time_avg_rmse(cfg.cycle_config("dc_wme", seed=s, sigma_obs=sigma))
            n += wme <= std
        wins[sigma] = n
    elapsed = time.perf_counter() - t0
    ok = all(n >= 8 for n in wins.values()) and elapsed < 300
    report(capsys, 5, ok, "dc_wme <= standard seeds per sigma "
           + ", ".join(f"{k}: {v}/10" for k, v in wins.items())
           + f" (need >=8), {elapsed:.0f}s (<300s)")


def test_c6_dof_ordering(capsys):
    t0 = time.perf_counter()
    cfg = load(CONFIGS / "l96_dof_sweep.toml")
    wins = {}
    for K in (36, 48):
        wins[K] = sum(time_avg_rmse(cfg.cycle_config("dc_wme", seed=s, dof=K))
                      < time_avg_rmse(cfg.cycle_config("standard", seed=s, dof=K))
                      for s in SEEDS)
    elapsed = time.perf_counter() - t0
    ok = all(n >= 8 for n in wins.values()) and elapsed < 600
    report(capsys, 6, ok, "dc_wme < standard seeds "
           + ", ".join(f"K={k}: {v}/10" for k, v in wins.items())
           + f" (need >=8), {elapsed:.0f}s (<600s)")


def test_c7_window_ordering(capsys):
    t0 = time.perf_counter()
    cfg = load(CONFIGS / "l96_window_sweep.toml")
    wins, gap = {}, {}
    for w in (2, 5, 10):
        std = np.array([time_avg_rmse(cfg.cycle_config("standard", seed=s, window_steps=w))
                        for s in SEEDS])
        wme = np.array([time_avg_rmse(cfg.cycle_config("dc_wme", seed=s, window_steps=w))
                        for s in SEEDS])
        wins[w] = int(np.sum(wme < std))
        gap[w] = float((np.mean(std) - np.mean(wme)) / np.mean(std))
    elapsed = time.perf_counter() - t0
    largest_at_2 = gap[2] == max(gap.values())
    ok = all(n >= 8 for n in wins.values()) and largest_at_2 and elapsed < 600
    report(capsys, 7, ok, "dc_wme < standard seeds "
           + ", ".join(f"w={k}: {v}/10" for k, v in wins.items())
           + " (need >=8); relative gap "
           + ", ".join(f"w={k}: {v:+.3f}" for k, v in gap.items())
           + f" (largest at w=2: {largest_at_2}), {elapsed:.0f}s (<600s)")


def test_c8_bias_ordering(capsys):
    t0 = time.perf_counter()
    cfg = load(CONFIGS / "l96_bias.toml")
    n_ok = 0
    peaks = []
    for s in SEEDS:
        peak = {}
        for v in ("standard", "dc", "dc_wme"):
            run = run_cycles(cfg.cycle_config(v, seed=s))
            # an aborted run has no complete bias series: it cannot satisfy the ordering
            peak[v] = np.inf if run.diverged_cycle is not None else normalized_bias(run)[1]
        peaks.append(peak)
        n_ok += peak["dc_wme"] <= peak["dc"] <= peak["standard"]
    elapsed = time.perf_counter() - t0
    med = {v: float(np.median([p[v] for p in peaks])) for v in ("standard", "dc", "dc_wme")}
    ok = n_ok >= 7 and elapsed < 300
    report(capsys, 8, ok, f"dc_wme <= dc <= standard in {n_ok}/10 seeds (need >=7); median "
           "max|bias| " + ", ".join(f"{k} {v:.3g}" for k, v in med.items())
           + f", {elapsed:.0f}s (<300s)")


def test_c9_cost_scaling(capsys):
    t0 = time.perf_counter()
    cfg = load(CONFIGS / "l96_timing.toml")
    wall = {}
    for v in ("standard", "dc", "dc_wme"):
        cc = cfg.cycle_config(v, dof=96)
        s = time.perf_counter()
        run_cycles(cc)
        wall[v] = time.perf_counter() - s
    elapsed = time.perf_counter() - t0
    r_dc, r_wme = wall["dc"] / wall["standard"], wall["dc_wme"] / wall["standard"]
    ok = r_dc <= 1.5 and r_wme <= 3.0 and elapsed < 120
    report(capsys, 9, ok, f"K=96, {cc.n_cycles} windows: dc/standard {r_dc:.2f} (<=1.5), "
                          f"dc_wme/standard {r_wme:.2f} (<=3.0), {elapsed:.0f}s (<120s)")


def test_c10_expected_ratio(capsys):
    t0 = time.perf_counter()
    init = GaussianDensity(np.zeros(3), isotropic(4.0, 3))
    Q = np.array([[1.0, 0.2, 0.0], [0.0, 1.0, 0.5]])
    pred = push_forward(init, Q)
    matched = expected_ratio(init, Q, pred, n_samples=100_000)
    # observed density inside the predicted one (R well below L)
    obs = GaussianDensity([0.5, -0.3], isotropic(1.0, 2))
    nearby = expected_ratio(init, Q, obs, n_samples=100_000, seed=1)
    elapsed = time.perf_counter() - t0
    within = abs(nearby.value - 1.0) <= 4 * nearby.std_error
    ok = matched.value == 1.0 and within and elapsed < 10
    report(capsys, 10, ok, f"matched E[r]={matched.value!r} (exactly 1), predictable case "
                           f"E[r]={nearby.value:.4f} +/- {nearby.std_error:.4f} (within 4 SE: "
                           f"{within}), {elapsed:.1f}s (<10s)")
