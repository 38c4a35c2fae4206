"""Command-line interface: ``tdsampler {sample,benchmark,oracle,riemannian-check}``.

Configuration is a flat ``key = value`` file (``#`` starts a comment).
Lists are comma separated; matrices and mask sets separate rows with ``;``.
Command-line flags and ``--set key=value`` override file values.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import tempfile
from dataclasses import dataclass, fields, replace
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .errors import ConfigError, TDSError, UnsupportedCombination
from .oracle import (
    AGGREGATE_COLUMNS,
    ROW_COLUMNS,
    TASKS,
    BenchmarkSpec,
    GridSpec,
    aggregate,
    benchmark,
    conditional_mean_oracle,
)
from .riemannian import run_property_suite
from .schedule import (
    NoiseSchedule,
    make_quadratic_vp_schedule,
    make_ve_const_schedule,
    make_ve_schedule,
)
from .score_model import AnalyticTarget, GaussianTarget, GMMTarget
from .smc import (
    Method,
    Resampling,
    SamplerConfig,
    check_compatible,
    ess,
    estimate_conditional_mean,
    run_sampler,
)
from .twisting import Flat, Inpaint, InpaintDOF, SmoothNorm, TwistConfig, VarianceScheme

# --- value codecs ----------------------------------------------------------------------


def _fmt_float(v: float) -> str:
    return repr(float(v))


def _p_int(s: str) -> int:
    try:
        return int(s)
    except ValueError:
        raise ValueError(f"expected an integer, got {s!r}") from None


def _p_float(s: str) -> float:
    try:
        return float(s)
    except ValueError:
        raise ValueError(f"expected a number, got {s!r}") from None


def _p_floats(s: str) -> Tuple[float, ...]:
    return tuple(_p_float(p.strip()) for p in s.split(",") if p.strip())


def _p_ints(s: str) -> Tuple[int, ...]:
    return tuple(_p_int(p.strip()) for p in s.split(",") if p.strip())


def _p_rows(s: str) -> Tuple[Tuple[float, ...], ...]:
    return tuple(_p_floats(r) for r in s.split(";") if r.strip())


def _p_int_rows(s: str) -> Tuple[Tuple[int, ...], ...]:
    return tuple(_p_ints(r) for r in s.split(";") if r.strip())


def _p_words(s: str) -> Tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _p_opt_int(s: str) -> Optional[int]:
    return None if s.lower() in ("none", "") else _p_int(s)


def _p_opt_float(s: str) -> Optional[float]:
    return None if s.lower() in ("auto", "") else _p_float(s)


def _p_bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _choice(*allowed: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        if s not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}; got {s!r}")
        return s

    return parse


_f_floats = lambda v: ", ".join(_fmt_float(x) for x in v)  # noqa: E731
_f_ints = lambda v: ", ".join(str(x) for x in v)  # noqa: E731
_f_rows = lambda v: "; ".join(_f_floats(r) for r in v)  # noqa: E731
_f_int_rows = lambda v: "; ".join(_f_ints(r) for r in v)  # noqa: E731


# --- config -----------------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    # schedule
    framework: str = "vp"
    steps: int = 100
    var_min: float = 1e-5
    var_max: float = 1e-1
    sigma2: float = 0.1
    step_vars: Tuple[float, ...] = ()
    # target
    target: str = "gaussian"
    mean: Tuple[float, ...] = (0.5, 0.5)
    cov: Tuple[Tuple[float, ...], ...] = ((1.0, 0.9), (0.9, 1.0))
    gmm_weights: Tuple[float, ...] = (0.3, 0.5, 0.2)
    gmm_means: Tuple[Tuple[float, ...], ...] = ((1.54, -0.29), (-2.18, 0.57), (-1.09, -1.40))
    gmm_std: float = 0.2
    # likelihood and twist
    likelihood: str = "inpaint"
    y: Tuple[float, ...] = (0.0,)
    mask: Tuple[int, ...] = (0,)
    mask_set: Tuple[Tuple[int, ...], ...] = ((0,), (1,))
    twist_scale: float = 1.0
    variance_scheme: str = "tds_scaling"
    data_var: Optional[float] = None
    final_step: str = "exact"
    # sampler
    method: str = "tds"
    K: int = 64
    resampling: str = "systematic"
    ess_threshold: float = 0.5
    proposal_var_mode: str = "model_var"
    inflation: float = 1.0
    truncate_at: Optional[int] = None
    seed: int = 0
    # benchmark
    methods: Tuple[str, ...] = ("tds", "guidance")
    tasks: Tuple[str, ...] = TASKS
    Ks: Tuple[int, ...] = (16, 64, 256, 1024, 4096)
    replicates: int = 25
    timing: bool = True
    # oracle grid
    grid_lo: float = -6.0
    grid_hi: float = 6.0
    grid_points: int = 1024
    # run
    output_dir: str = "."
    workers: int = 1


_METHODS = tuple(m.value for m in Method)


def _check_min(lo):
    def check(v):
        if v < lo:
            raise ValueError(f"must be >= {lo}")

    return check


def _check_range(lo, hi):
    def check(v):
        if not lo <= v <= hi:
            raise ValueError(f"must lie in [{lo}, {hi}]")

    return check


def _check_positive(v):
    if v is not None and not v > 0:
        raise ValueError("must be positive")


def _check_each(parse):
    def check(v):
        for item in v:
            parse(item)

    return check


_KEYS: Dict[str, Tuple[Callable[[str], Any], Callable[[Any], str], Optional[Callable]]] = {
    "framework": (_choice("vp", "ve_const", "ve_general"), str, None),
    "steps": (_p_int, str, _check_min(1)),
    "var_min": (_p_float, _fmt_float, _check_positive),
    "var_max": (_p_float, _fmt_float, _check_positive),
    "sigma2": (_p_float, _fmt_float, _check_positive),
    "step_vars": (_p_floats, _f_floats, None),
    "target": (_choice("gaussian", "gmm"), str, None),
    "mean": (_p_floats, _f_floats, None),
    "cov": (_p_rows, _f_rows, None),
    "gmm_weights": (_p_floats, _f_floats, None),
    "gmm_means": (_p_rows, _f_rows, None),
    "gmm_std": (_p_float, _fmt_float, _check_positive),
    "likelihood": (_choice("smooth_norm", "inpaint", "inpaint_dof", "flat"), str, None),
    "y": (_p_floats, _f_floats, None),
    "mask": (_p_ints, _f_ints, None),
    "mask_set": (_p_int_rows, _f_int_rows, None),
    "twist_scale": (_p_float, _fmt_float, _check_min(0.0)),
    "variance_scheme": (_choice(*(v.value for v in VarianceScheme)), str, None),
    "data_var": (_p_opt_float, lambda v: "auto" if v is None else _fmt_float(v), _check_positive),
    "final_step": (_choice("heuristic", "exact"), str, None),
    "method": (_choice(*_METHODS), str, None),
    "K": (_p_int, str, _check_min(1)),
    "resampling": (_choice("systematic", "multinomial"), str, None),
    "ess_threshold": (_p_float, _fmt_float, _check_range(0.0, 1.0)),
    "proposal_var_mode": (_choice("model_var", "inflated"), str, None),
    "inflation": (_p_float, _fmt_float, _check_min(1.0)),
    "truncate_at": (_p_opt_int, lambda v: "none" if v is None else str(v), None),
    "seed": (_p_int, str, _check_min(0)),
    "methods": (_p_words, lambda v: ", ".join(v), _check_each(_choice(*_METHODS))),
    "tasks": (_p_words, lambda v: ", ".join(v), _check_each(_choice(*TASKS))),
    "Ks": (_p_ints, _f_ints, lambda v: [_check_min(1)(k) for k in v]),
    "replicates": (_p_int, str, _check_min(1)),
    "timing": (_p_bool, lambda v: "true" if v else "false", None),
    "grid_lo": (_p_float, _fmt_float, None),
    "grid_hi": (_p_float, _fmt_float, None),
    "grid_points": (_p_int, str, _check_min(2)),
    "output_dir": (str, str, None),
    "workers": (_p_int, str, _check_min(1)),
}
assert set(_KEYS) == {f.name for f in fields(ExperimentConfig)}


def _parse_value(key: str, raw: str, where: str):
    if key not in _KEYS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    parse, _, check = _KEYS[key]
    try:
        value = parse(raw)
        if check is not None:
            check(value)
    except ValueError as exc:
        raise ConfigError(f"{where}: {key}: {exc}") from None
    return value


def parse_config(text: str, overrides: Sequence[str] = (), base: Optional[ExperimentConfig] = None):
    """Parse and fully validate a config document (then ``key=value`` overrides)."""
    values: Dict[str, Any] = {}
    where: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {body!r}")
        key, raw = (p.strip() for p in body.split("=", 1))
        values[key] = _parse_value(key, raw, f"line {lineno}")
        where[key] = f"line {lineno}"
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key=value")
        key, raw = (p.strip() for p in item.split("=", 1))
        values[key] = _parse_value(key, raw, f"--set {key}")
        where[key] = f"--set {key}"
    cfg = replace(base or ExperimentConfig(), **values)
    validate(cfg, where)
    return cfg


def format_config(cfg: ExperimentConfig) -> str:
    out = []
    for f in fields(cfg):
        out.append(f"{f.name} = {_KEYS[f.name][1](getattr(cfg, f.name))}")
    return "\n".join(out) + "\n"


def _blame(where, *keys):
    located = [where[k] for k in keys if k in where]
    return located[0] if located else "config"


def validate(cfg: ExperimentConfig, where: Optional[dict] = None) -> None:
    """Build every component once so errors surface before any run starts."""
    where = where or {}
    builders = [
        (("framework", "steps", "var_min", "var_max", "sigma2", "step_vars"), build_schedule),
        (("target", "mean", "cov", "gmm_weights", "gmm_means", "gmm_std"), build_target),
        (("likelihood", "y", "mask", "mask_set"), build_likelihood),
        (("twist_scale", "variance_scheme", "data_var", "final_step"), build_twist),
        (("method", "K", "ess_threshold", "proposal_var_mode", "inflation", "truncate_at"),
         build_sampler_config),
        (("grid_lo", "grid_hi", "grid_points"), build_grid),
    ]
    for keys, build in builders:
        try:
            build(cfg)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{_blame(where, *keys)}: {exc}") from None
    lik = build_likelihood(cfg)
    tgt = build_target(cfg)
    try:
        lik.validate(tgt.dim)
    except ValueError as exc:
        raise ConfigError(f"{_blame(where, 'mask', 'mask_set', 'likelihood')}: {exc}") from None
    try:
        check_compatible(Method(cfg.method), lik)
    except UnsupportedCombination as exc:
        raise ConfigError(f"{_blame(where, 'method', 'likelihood')}: {exc}") from None
    if cfg.truncate_at is not None and cfg.truncate_at > cfg.steps:
        raise ConfigError(f"{_blame(where, 'truncate_at')}: truncate_at exceeds steps")


def build_schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    if cfg.framework == "vp":
        return make_quadratic_vp_schedule(cfg.steps, cfg.var_min, cfg.var_max)
    if cfg.framework == "ve_const":
        return make_ve_const_schedule(cfg.steps, cfg.sigma2)
    if len(cfg.step_vars) != cfg.steps:
        raise ValueError(f"step_vars has {len(cfg.step_vars)} entries; steps = {cfg.steps}")
    return make_ve_schedule(cfg.step_vars)


def build_target(cfg: ExperimentConfig) -> AnalyticTarget:
    if cfg.target == "gaussian":
        return GaussianTarget(np.array(cfg.mean), np.array(cfg.cov))
    return GMMTarget(np.array(cfg.gmm_weights), np.array(cfg.gmm_means), cfg.gmm_std)


def build_likelihood(cfg: ExperimentConfig):
    if cfg.likelihood == "smooth_norm":
        if len(cfg.y) != 1:
            raise ValueError("smooth_norm needs a scalar y")
        return SmoothNorm(cfg.y[0])
    if cfg.likelihood == "inpaint":
        return Inpaint(cfg.mask, cfg.y)
    if cfg.likelihood == "inpaint_dof":
        return InpaintDOF(cfg.mask_set, cfg.y)
    return Flat()


def build_twist(cfg: ExperimentConfig) -> TwistConfig:
    return TwistConfig(cfg.twist_scale, cfg.variance_scheme, cfg.data_var, cfg.final_step)


def build_sampler_config(cfg: ExperimentConfig) -> SamplerConfig:
    return SamplerConfig(
        method=cfg.method, K=cfg.K, resampling=cfg.resampling,
        ess_threshold=cfg.ess_threshold, proposal_var_mode=cfg.proposal_var_mode,
        inflation=cfg.inflation, truncate_at=cfg.truncate_at, seed=cfg.seed,
        twist=build_twist(cfg),
    )


def build_grid(cfg: ExperimentConfig) -> GridSpec:
    return GridSpec((cfg.grid_lo,) * 2, (cfg.grid_hi,) * 2, cfg.grid_points)


def build_benchmark(cfg: ExperimentConfig) -> BenchmarkSpec:
    return BenchmarkSpec(
        target=build_target(cfg), schedule=build_schedule(cfg), methods=cfg.methods,
        tasks=cfg.tasks, Ks=cfg.Ks, replicates=cfg.replicates, seed=cfg.seed,
        y=cfg.y[0], twist=build_twist(cfg), ess_threshold=cfg.ess_threshold,
        resampling=Resampling(cfg.resampling), grid=build_grid(cfg),
    )


# --- output ---------------------------------------------------------------------------------


def atomic_write(path: str, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def particles_csv(states, weights) -> str:
    d = states.shape[1]
    header = ["particle_index", "weight"] + [f"x{i}" for i in range(d)]
    rows = ([k, float(w)] + [float(v) for v in x] for k, (x, w) in enumerate(zip(states, weights)))
    return _csv(header, rows)


def diagnostics_csv(diag) -> str:
    rows = ((t, e, "true" if r else "false", m) for t, e, r, m in diag.rows())
    return _csv(["t", "ess", "resampled", "max_abs_log_incr_weight"], rows)


# --- subcommands --------------------------------------------------------------------------


def _cmd_sample(cfg: ExperimentConfig, args) -> int:
    res = run_sampler(build_sampler_config(cfg), build_target(cfg), build_likelihood(cfg),
                      build_schedule(cfg))
    atomic_write(os.path.join(cfg.output_dir, "particles.csv"), particles_csv(res.states, res.weights))
    atomic_write(os.path.join(cfg.output_dir, "diagnostics.csv"), diagnostics_csv(res.diagnostics))
    est = estimate_conditional_mean(res.states, res.weights)
    print("estimate = " + _f_floats(est))
    print(f"final_ess = {ess(res.weights):.6g}")
    print(f"resample_count = {res.diagnostics.resample_count}")
    return 0


def _cmd_benchmark(cfg: ExperimentConfig, args) -> int:
    rows = benchmark(build_benchmark(cfg), workers=cfg.workers, timing=cfg.timing)
    for r in rows:
        if r["failure"]:
            print(f"WARNING: run {r['method']}/{r['task']}/K={r['K']}/rep={r['replicate']} "
                  f"failed: {r['failure']}", file=sys.stderr)
    atomic_write(os.path.join(cfg.output_dir, "benchmark.csv"),
                 _csv(ROW_COLUMNS, ([r[c] for c in ROW_COLUMNS] for r in rows)))
    agg = aggregate(rows)
    atomic_write(os.path.join(cfg.output_dir, "aggregate.csv"),
                 _csv(AGGREGATE_COLUMNS, ([a[c] for c in AGGREGATE_COLUMNS] for a in agg)))
    print(f"wrote {len(rows)} rows to {os.path.join(cfg.output_dir, 'benchmark.csv')}")
    return 0


def _cmd_oracle(cfg: ExperimentConfig, args) -> int:
    mean = conditional_mean_oracle(build_target(cfg), build_likelihood(cfg), cfg.twist_scale,
                                   build_grid(cfg))
    print("oracle_mean = " + _f_floats(mean))
    return 0


def _cmd_riemannian(cfg: ExperimentConfig, args) -> int:
    results = run_property_suite(seed=cfg.seed, quick=args.quick)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 2


_COMMANDS = {
    "sample": _cmd_sample,
    "benchmark": _cmd_benchmark,
    "oracle": _cmd_oracle,
    "riemannian-check": _cmd_riemannian,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tdsampler", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"tdsampler {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in _COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        sp.add_argument("--output-dir", help="shorthand for --set output_dir=PATH")
        sp.add_argument("--workers", type=int, help="worker processes (default: $TDS_WORKERS or 1)")
        sp.add_argument("--print-config", action="store_true",
                        help="print the resolved config and exit")
        if name == "riemannian-check":
            sp.add_argument("--quick", action="store_true", help="smaller sample sizes")
        else:
            sp.set_defaults(quick=False)
    return p


def load_config(args) -> ExperimentConfig:
    text = ""
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config!r}: {exc.strerror}") from None
    base = ExperimentConfig()
    env_workers = os.environ.get("TDS_WORKERS")
    if env_workers:
        base = replace(base, workers=_parse_value("workers", env_workers, "TDS_WORKERS"))
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.output_dir is not None:
        overrides.append(f"output_dir={args.output_dir}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    return parse_config(text, overrides, base)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args)
        if args.print_config:
            sys.stdout.write(format_config(cfg))
            return 0
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"ERROR: config: {exc}", file=sys.stderr)
        return 1
    except (TDSError, ValueError, ArithmeticError, OSError) as exc:
        print(f"ERROR: runtime: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
