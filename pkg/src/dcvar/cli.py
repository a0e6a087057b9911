"""``dcvar`` command line: twin runs, sweeps, bound study, gradient check, timing.

Exit codes: 0 success, 1 configuration error, 2 a run diverged,
3 verification failure.
"""
import argparse
from concurrent.futures import ProcessPoolExecutor
import csv
import io
import json
import logging
import math
import os
from pathlib import Path
import statistics
import sys
import tempfile
import time

import numpy as np

from . import adjoint, assimilate, cost, diagnostics, dynamics, observation
from .config import load
from .cov import isotropic
from .errors import ConfigError, DcvarError, NonFinite
from .rng import stream

log = logging.getLogger("dcvar")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3
SWEEP_COLUMNS = ("axis_value", "variant", "seed", "time_avg_rmse", "wall_time_s")
TIMING_COLUMNS = ("dof", "variant", "median_wall_time_s", "repetitions", "n_cycles")
SCHEMA_DIR = Path(__file__).with_name("schemas")


def configure_logging():
    level = os.environ.get("DCVAR_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def atomic_write(path, text):
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=assimilate._json_default,
                      allow_nan=True) + "\n"


def _csv(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x):
    return repr(float(x))


def _out_dir(args, cfg):
    return Path(args.out if args.out else cfg.output_dir)


def _pool_map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# --- run-twin ------------------------------------------------------------------

def _run_one(cycle_cfg):
    run = assimilate.run_cycles(cycle_cfg)
    return assimilate.metrics_csv(run), assimilate.summary(run)


def cmd_run_twin(args, cfg):
    out = _out_dir(args, cfg)
    cfgs = [cfg.cycle_config(v, seed=args.seed) for v in cfg.variants]
    results = _pool_map(_run_one, cfgs, args.jobs)
    code = EXIT_OK
    for c, (text, summ) in zip(cfgs, results):
        atomic_write(out / f"{c.variant}.csv", text)
        atomic_write(out / f"{c.variant}.json", _json(summ))
        print(f"{c.variant}: time_avg_rmse={summ['time_avg_rmse']:.6g} "
              f"max_bias={summ['max_bias']:.4g} cycles={summ['n_cycles']}")
        if summ["diverged_cycle"] is not None:
            print(f"{c.variant}: diverged at cycle {summ['diverged_cycle']}", file=sys.stderr)
            code = EXIT_DIVERGED
    return code


# --- sweep -----------------------------------------------------------------------

_AXIS_FIELD = {"dof": "dof", "window": "window_steps", "noise": "sigma_obs"}


def _sweep_point(job):
    axis, value, variant, seed, cycle_cfg, point_path = job
    t0 = time.perf_counter()
    try:
        run = assimilate.run_cycles(cycle_cfg)
        summ = assimilate.summary(run)
        rmse = summ["time_avg_rmse"] if run.diverged_cycle is None else math.nan
        status = "ok" if run.diverged_cycle is None else "diverged"
        record = {"status": status, "summary": summ}
    except DcvarError as exc:
        rmse = math.nan
        record = {"status": "failed", "error": str(exc)}
    wall = time.perf_counter() - t0
    record.update(axis=axis, axis_value=value, variant=variant, seed=seed, wall_time_s=wall)
    atomic_write(point_path, _json(record))
    return value, variant, seed, rmse, wall, record["status"]


def cmd_sweep(args, cfg):
    axis = args.axis or cfg.section("sweep").get("axis")
    if axis is None:
        raise ConfigError("sweep.axis: no sweep axis given (use --axis or [sweep] axis)", "sweep.axis")
    values = cfg.sweep_values(axis)
    seeds = [args.seed] if args.seed is not None else cfg.sweep_seeds()
    out = _out_dir(args, cfg)
    jobs = []
    for value in values:
        for variant in cfg.variants:
            for seed in seeds:
                cc = cfg.cycle_config(variant, seed=seed, **{_AXIS_FIELD[axis]: value})
                name = f"{axis}_{value}_{variant}_seed{seed}.json"
                jobs.append((axis, value, variant, seed, cc, out / "points" / name))
    results = _pool_map(_sweep_point, jobs, args.jobs)
    rows = [[v if isinstance(v, int) else _fmt(v), var, s, _fmt(r), _fmt(w)]
            for v, var, s, r, w, _ in results]
    atomic_write(out / f"sweep_{axis}.csv", _csv(SWEEP_COLUMNS, rows))
    bad = [(v, var, s, st) for v, var, s, _, _, st in results if st != "ok"]
    for v, var, s, st in bad:
        print(f"point {axis}={v} {var} seed={s}: {st}", file=sys.stderr)
    print(f"sweep {axis}: {len(results)} points, {len(bad)} not ok -> {out / f'sweep_{axis}.csv'}")
    return EXIT_OK


# --- estimate-bound ----------------------------------------------------------------

def cmd_estimate_bound(args, cfg):
    b = cfg.section("bound")
    mcfg = cfg.section("model")
    name = mcfg.get("name", "lorenz63")
    dt = float(mcfg.get("dt", 0.01))
    if name == "lorenz63":
        model = dynamics.lorenz63(dt=dt)
    else:
        model = dynamics.lorenz96(K=int(mcfg.get("dof", 40)), F=float(mcfg.get("forcing", 8.0)), dt=dt)
    op = observation.make_operator(b.get("observed", [0, 1]), model.dim)
    seed = cfg.seed if args.seed is None else args.seed
    est = diagnostics.estimate_sigma_b_bound(
        model, op, float(b.get("gamma", 0.1)), float(b.get("sigma_obs_sq", 4.0)),
        int(b.get("N", 5)), float(b.get("t_integrate", 10.0)), int(b.get("n_traj", 50)),
        seed, tuple(b.get("box", (-10.0, 10.0))), float(b.get("t_spinup", 5.0)))
    out = _out_dir(args, cfg)
    atomic_write(out / "bound_samples.csv", est.to_csv())
    summ = est.summary()
    summ["model"] = name
    atomic_write(out / "bound_summary.json", _json(summ))
    lo, hi = summ["ci95"]
    print(f"bound mean={est.mean:.6g} (95% CI {lo:.4g}..{hi:.4g}), "
          f"{summ['n_samples']} samples, {est.excluded} excluded")
    return EXIT_OK


# --- grad-check ------------------------------------------------------------------------

def gradcheck_problem(cycle_cfg, variant, perturbation=1.0):
    """A single window around a spun-up truth with a perturbed control point."""
    model = cycle_cfg.build_model()
    op = observation.make_operator(cycle_cfg.obs_operator, model.dim)
    zt = assimilate.initial_truth(cycle_cfg, model)
    sigma = cycle_cfg.effective_sigma
    _, obs = observation.generate_twin_data(model, zt, cycle_cfg.obs_times(), op,
                                            cycle_cfg.sigma_obs,
                                            stream(cycle_cfg.seed, "noise", 0),
                                            steps=cycle_cfg.window_steps)
    zb = assimilate.initial_background(cycle_cfg, zt)
    B = isotropic(cycle_cfg.background_variance, model.dim)
    R = isotropic(sigma**2, op.out_dim)
    prob = cost.make_window(model, zb, B, obs, variant, R=R, steps=cycle_cfg.window_steps)
    z0 = zt + perturbation * stream(cycle_cfg.seed, "gradcheck").standard_normal(model.dim)
    return prob, z0


def cmd_grad_check(args, cfg):
    g = cfg.section("gradcheck")
    eps = tuple(g.get("eps", adjoint.DEFAULT_EPS))
    tol = float(g.get("tolerance", 1e-5))
    corrupt = bool(g.get("corrupt_gradient", False)) or args.corrupt_gradient
    report = {"tolerance": tol, "eps": list(eps), "corrupt_gradient": corrupt, "variants": {}}
    ok = True
    for variant in cfg.variants:
        cc = cfg.cycle_config(variant, seed=args.seed)
        prob, z0 = gradcheck_problem(cc, variant, float(g.get("perturbation", 1.0)))
        ev = adjoint.gradient(prob, z0)
        grad = 2.0 * ev.gradient if corrupt else ev.gradient
        rep = adjoint.fd_gradient_check(lambda z: cost.evaluate(prob, z), z0, eps, grad)
        passed = rep.passed(tol)
        ok &= passed
        report["variants"][variant] = {
            "max_rel_error": rep.max_rel_error, "best_eps": rep.best_eps,
            "errors_by_eps": {repr(k): v for k, v in rep.errors_by_eps.items()},
            "nan_flag": rep.nan_flag, "passed": passed}
        print(f"{variant}: max_rel_error={rep.max_rel_error:.3e} "
              f"(eps={rep.best_eps:g}) {'PASS' if passed else 'FAIL'}")
    report["passed"] = ok
    atomic_write(_out_dir(args, cfg) / "gradcheck.json", _json(report))
    return EXIT_OK if ok else EXIT_VERIFY


# --- timing -----------------------------------------------------------------------------

def time_variants(cfg, dof_list, repetitions, seed=None):
    """Median wall time of a full cycled run per (dof, variant)."""
    rows = []
    for dof in dof_list:
        for variant in cfg.variants:
            cc = cfg.cycle_config(variant, seed=seed, dof=int(dof))
            times = []
            for _ in range(repetitions):
                t0 = time.perf_counter()
                assimilate.run_cycles(cc)
                times.append(time.perf_counter() - t0)
            rows.append((int(dof), variant, statistics.median(times), repetitions, cc.n_cycles))
    return rows


def cmd_timing(args, cfg):
    t = cfg.section("timing")
    dof_list = t.get("dof_list") or [cfg.section("model").get("dof", 40)]
    reps = int(t.get("repetitions", 5))
    rows = time_variants(cfg, dof_list, reps, args.seed)
    out = _out_dir(args, cfg)
    atomic_write(out / "timing.csv",
                 _csv(TIMING_COLUMNS, [[d, v, _fmt(m), r, n] for d, v, m, r, n in rows]))
    for d, v, m, _, _ in rows:
        print(f"K={d} {v}: median {m:.3f} s")
    return EXIT_OK


# --- entry point ------------------------------------------------------------------------

HELP = {
    "run-twin": "cycled twin experiment for each listed variant",
    "sweep": "run over a dof, window or noise axis and several seeds",
    "estimate-bound": "Monte Carlo lower bound on the background variance",
    "grad-check": "adjoint gradient against central finite differences",
    "timing": "median wall time per variant and state dimension",
}

COMMANDS = {
    "run-twin": cmd_run_twin,
    "sweep": cmd_sweep,
    "estimate-bound": cmd_estimate_bound,
    "grad-check": cmd_grad_check,
    "timing": cmd_timing,
}


def build_parser():
    p = argparse.ArgumentParser(prog="dcvar", description=(
        "Standard, DC and DC-WME 4D-Var twin experiments on Lorenz-63/96."))
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name, help=HELP[name], description=HELP[name])
        s.add_argument("--config", required=True, metavar="PATH", help="TOML experiment file")
        s.add_argument("--out", metavar="DIR", help="output directory (overrides config)")
        s.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes")
        s.add_argument("--seed", type=int, default=None, metavar="U64",
                       help="top-level seed (overrides config)")
        if name == "sweep":
            s.add_argument("--axis", choices=["dof", "window", "noise"])
        if name == "grad-check":
            s.add_argument("--corrupt-gradient", action="store_true",
                           help="test mode: double the adjoint gradient before checking")
    return p


def main(argv=None):
    configure_logging()
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFinite as exc:
        # the truth itself left the finite range (e.g. an unstable time step)
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
