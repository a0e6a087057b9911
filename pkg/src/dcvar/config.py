"""Experiment configuration files (TOML).

Sections map onto the library: ``[experiment]``, ``[model]``,
``[observation]``, ``[assimilation]``, ``[optimizer]``, ``[sweep]``,
``[bound]``, ``[gradcheck]`` and ``[timing]``. Unknown sections and keys are
rejected with the line they appear on; physical parameters are validated
before any run starts.
"""
from dataclasses import dataclass, field
import re
import sys
from typing import Any, Dict, Optional

from .assimilate import CycleConfig
from .cost import VARIANTS
from .errors import ConfigError
from .optimize import LbfgsOptions

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA: Dict[str, Dict[str, tuple]] = {
    "experiment": {"name": (str,), "variants": (list,), "output_dir": (str,), "seed": (int,)},
    "model": {"name": (str,), "dof": (int,), "forcing": (int, float), "dt": (int, float)},
    "observation": {"every": (int,), "offset": (int,), "operator": (str, list),
                    "sigma_obs": (int, float), "schedule": (list,)},
    "assimilation": {"window_steps": (int,), "n_cycles": (int,), "total_steps": (int,),
                     "alpha": (int, float), "alpha_factor": (int, float),
                     "gamma": (int, float), "spinup_steps": (int,), "on_diverge": (str,)},
    "optimizer": {"memory": (int,), "max_iters": (int,), "grad_tol": (int, float),
                  "grad_tol_rel": (int, float), "c1": (int, float), "c2": (int, float),
                  "max_line_search_steps": (int,)},
    "sweep": {"axis": (str,), "dof_list": (list,), "window_list": (list,),
              "noise_list": (list,), "seeds": (list,)},
    "bound": {"gamma": (int, float), "sigma_obs_sq": (int, float), "N": (int,),
              "t_integrate": (int, float), "n_traj": (int,), "observed": (list,),
              "box": (list,), "t_spinup": (int, float)},
    "gradcheck": {"eps": (list,), "tolerance": (int, float), "corrupt_gradient": (bool,),
                  "perturbation": (int, float)},
    "timing": {"dof_list": (list,), "repetitions": (int,)},
}

SWEEP_AXES = {"dof": "dof_list", "window": "window_list", "noise": "noise_list"}


def _key_lines(text):
    """Map ``(section, key)`` and ``(section, None)`` to 1-based source lines."""
    lines = {}
    section = ""
    for i, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        m = re.match(r"^\[\s*([A-Za-z0-9_.-]+)\s*\]", s)
        if m:
            section = m.group(1)
            lines.setdefault((section, None), i)
            continue
        m = re.match(r"^([A-Za-z0-9_-]+|\"[^\"]+\")\s*=", s)
        if m:
            lines.setdefault((section, m.group(1).strip('"')), i)
    return lines


@dataclass
class ExperimentConfig:
    raw: Dict[str, Dict[str, Any]]
    path: Optional[str] = None
    lines: Dict = field(default_factory=dict)

    def section(self, name):
        return self.raw.get(name, {})

    def line_of(self, section, key=None):
        return self.lines.get((section, key))

    def error(self, section, key, message):
        line = self.line_of(section, key)
        where = f" (line {line})" if line else ""
        return ConfigError(f"{section}.{key}: {message}{where}", f"{section}.{key}", line)

    # --- derived views ----------------------------------------------------

    @property
    def seed(self):
        return int(self.section("experiment").get("seed", 0))

    @property
    def variants(self):
        return list(self.section("experiment").get("variants", VARIANTS))

    @property
    def output_dir(self):
        return self.section("experiment").get("output_dir", "out")

    @property
    def name(self):
        return self.section("experiment").get("name", "experiment")

    def lbfgs(self):
        opt = self.section("optimizer")
        base = {"grad_tol_rel": 1e-6}
        base.update(opt)
        try:
            return LbfgsOptions(**base)
        except ValueError as exc:
            raise self.error("optimizer", next(iter(opt), "memory"), str(exc)) from None

    def cycle_config(self, variant=None, seed=None, **overrides) -> CycleConfig:
        m, o, a = self.section("model"), self.section("observation"), self.section("assimilation")
        window = int(overrides.pop("window_steps", a.get("window_steps", 20)))
        sigma = float(overrides.pop("sigma_obs", o.get("sigma_obs", 1.0)))
        dof = int(overrides.pop("dof", m.get("dof", 40)))
        n_cycles = a.get("n_cycles")
        if "total_steps" in a:
            n_cycles = int(a["total_steps"]) // window
        alpha = a.get("alpha")
        if alpha is None and "alpha_factor" in a:
            alpha = float(a["alpha_factor"]) * (sigma if sigma > 0 else 1.0) ** 2
        kwargs = dict(
            variant=variant or self.variants[0],
            model=m.get("name", "lorenz96"),
            dof=dof,
            forcing=float(m.get("forcing", 8.0)),
            dt=float(m.get("dt", 0.01)),
            window_steps=window,
            obs_every=int(o.get("every", 4)),
            obs_offset=o.get("offset"),
            schedule=o.get("schedule"),
            obs_operator=o.get("operator", "alternating"),
            n_cycles=int(n_cycles if n_cycles is not None else 25),
            sigma_obs=sigma,
            alpha=None if alpha is None else float(alpha),
            gamma=float(a.get("gamma", 0.1)),
            seed=self.seed if seed is None else int(seed),
            spinup_steps=int(a.get("spinup_steps", 1000)),
            on_diverge=a.get("on_diverge", "abort"),
            lbfgs=self.lbfgs(),
        )
        kwargs.update(overrides)
        return CycleConfig(**kwargs)

    def sweep_values(self, axis):
        if axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}",
                              "sweep.axis")
        key = SWEEP_AXES[axis]
        vals = self.section("sweep").get(key)
        if not vals:
            raise self.error("sweep", key, f"sweep axis {axis!r} needs a non-empty list")
        return list(vals)

    def sweep_seeds(self):
        return [int(s) for s in self.section("sweep").get("seeds", [self.seed])]


def _validate(cfg: ExperimentConfig):
    for sec, body in cfg.raw.items():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}] (line {cfg.line_of(sec)})", sec,
                              cfg.line_of(sec))
        if not isinstance(body, dict):
            raise ConfigError(f"[{sec}] must be a table", sec, cfg.line_of(sec))
        for key, val in body.items():
            if key not in SCHEMA[sec]:
                raise cfg.error(sec, key, "unknown key")
            types = SCHEMA[sec][key]
            if isinstance(val, bool) and bool not in types:
                raise cfg.error(sec, key, "expected a number, got a boolean")
            if not isinstance(val, types):
                names = " or ".join(t.__name__ for t in types)
                raise cfg.error(sec, key, f"expected {names}, got {type(val).__name__}")

    def positive(sec, key, strict=True):
        v = cfg.section(sec).get(key)
        if v is None:
            return
        if (v <= 0) if strict else (v < 0):
            raise cfg.error(sec, key, "must be positive" if strict else "must be non-negative")

    positive("observation", "sigma_obs", strict=False)
    positive("observation", "every")
    positive("model", "dt")
    positive("model", "dof")
    positive("assimilation", "window_steps")
    positive("assimilation", "n_cycles", strict=False)
    positive("assimilation", "total_steps", strict=False)
    positive("assimilation", "alpha")
    positive("assimilation", "alpha_factor")
    positive("assimilation", "gamma")
    positive("bound", "gamma")
    positive("bound", "sigma_obs_sq")
    positive("bound", "N")
    positive("bound", "t_integrate")
    positive("bound", "n_traj")
    positive("gradcheck", "tolerance")
    positive("gradcheck", "perturbation")
    positive("timing", "repetitions")

    model = cfg.section("model").get("name", "lorenz96")
    if model not in ("lorenz63", "lorenz96"):
        raise cfg.error("model", "name", f"unknown model {model!r}")
    for v in cfg.variants:
        if v not in VARIANTS:
            raise cfg.error("experiment", "variants", f"unknown variant {v!r}")
    if not cfg.variants:
        raise cfg.error("experiment", "variants", "must list at least one variant")
    div = cfg.section("assimilation").get("on_diverge")
    if div is not None and div not in ("abort", "reset"):
        raise cfg.error("assimilation", "on_diverge", "must be 'abort' or 'reset'")
    sw = cfg.section("sweep")
    if "axis" in sw and sw["axis"] not in SWEEP_AXES:
        raise cfg.error("sweep", "axis", f"must be one of {sorted(SWEEP_AXES)}")
    for sec, key in (("sweep", "dof_list"), ("sweep", "window_list"), ("timing", "dof_list")):
        for x in cfg.section(sec).get(key, []):
            if isinstance(x, bool) or not isinstance(x, int) or x <= 0:
                raise cfg.error(sec, key, "entries must be positive integers")
    for x in sw.get("noise_list", []):
        if isinstance(x, bool) or not isinstance(x, (int, float)) or x < 0:
            raise cfg.error("sweep", "noise_list", "entries must be non-negative numbers")
    for x in cfg.section("gradcheck").get("eps", []):
        if isinstance(x, bool) or not isinstance(x, (int, float)) or x <= 0:
            raise cfg.error("gradcheck", "eps", "entries must be positive numbers")

    # build one cycle config so cross-field rules (divisibility, ...) run early
    try:
        cfg.cycle_config()
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        key = ("assimilation", "window_steps") if "divisible" in msg else ("experiment", "name")
        for sec, fields in SCHEMA.items():
            for k in fields:
                if k in msg and k in cfg.section(sec):
                    key = (sec, k)
        raise cfg.error(key[0], key[1], msg) from None


def loads(text, path=None) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"{path or '<config>'}: parse error: {exc}", None,
                          int(m.group(1)) if m else None) from None
    cfg = ExperimentConfig(raw, path, _key_lines(text))
    _validate(cfg)
    return cfg


def load(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text, str(path))
