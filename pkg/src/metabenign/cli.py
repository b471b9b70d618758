"""Command-line front end: ``reproduce``, ``analyze``, ``solve`` and ``sweep``."""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import math
import os
import sys
import time

import numpy as np

from .adaptation import MetaMethod
from .experiments import (
    PRESETS,
    EnvTemplate,
    PanelSpec,
    SweepConfig,
    _atomic_write_all,
    _fmt,
    dataset_heterogeneity,
    dataset_stream,
    default_workers,
    header_line,
    preset,
    run_sweep,
    write_outputs,
)
from .meta_solver import MonteCarlo, min_norm_solve, population_solution
from .risk import decompose, excess_risk, theorem_bound
from .spectrum import (
    SpectrumError,
    eig_map,
    heterogeneity,
    hyperparameter_safe,
    read_spectrum_csv,
    spectrum_report,
)
from .task_model import ConfigError, sample_meta_dataset

EXIT_OK, EXIT_NUMERIC, EXIT_USER = 0, 1, 2

# lower-case INI key -> field name
ENV_KEYS = {f.name.lower(): f.name for f in dataclasses.fields(EnvTemplate)}
METHOD_KEYS = {"kind": "kind", "alpha": "alpha", "gamma": "gamma", "pool": "pool"}
SWEEP_KEYS = {
    k.lower(): k
    for k in ("M", "N", "seed", "num_seeds", "mc_draws", "c1", "x_axis", "x_values", "metric",
              "series_param", "series_values", "name")
}
OUTPUT_KEYS = {"out_dir": "out_dir", "path": "path", "dump_theta": "dump_theta", "charts": "charts"}
SECTIONS = {"env": ENV_KEYS, "method": METHOD_KEYS, "sweep": SWEEP_KEYS, "output": OUTPUT_KEYS}


class UserError(Exception):
    pass


def _fail(code: int, kind: str, message: str) -> int:
    print(f"metabenign: error: {kind}: {message}".replace("\n", " "), file=sys.stderr)
    return code


def load_ini(path: str) -> dict[str, dict[str, str]]:
    """Sections as ``{section: {field: raw string}}``; unknown sections or keys are rejected."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise UserError(f"cannot read config {path!r}: {exc.strerror}") from exc
    except configparser.Error as exc:
        raise UserError(f"malformed config {path!r}: {exc}") from exc
    out = {name: {} for name in SECTIONS}
    for section in parser.sections():
        if section not in SECTIONS:
            raise UserError(f"unknown config section [{section}]")
        allowed = SECTIONS[section]
        for key, value in parser.items(section):
            if key not in allowed:
                raise UserError(f"unknown config key {key!r} in [{section}]")
            out[section][allowed[key]] = value
    return out


def _typed(cls, raw: dict[str, str]) -> dict:
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for name, value in raw.items():
        t = types[name]
        try:
            out[name] = int(value) if t == "int" else float(value) if t == "float" else value.strip()
        except ValueError as exc:
            raise UserError(f"{name} = {value!r} is not a valid {t}") from exc
    return out


def _bool(value: str, name: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise UserError(f"{name} = {value!r} is not a boolean")


def _numbers(value: str, name: str, cast=float) -> tuple:
    try:
        return tuple(cast(v) for v in value.replace(",", " ").split())
    except ValueError as exc:
        raise UserError(f"{name} = {value!r} is not a list of numbers") from exc


def _env(ini: dict) -> EnvTemplate:
    return EnvTemplate(**_typed(EnvTemplate, ini["env"]))


def _methods(raw: dict[str, str], pool: bool) -> tuple[MetaMethod, ...]:
    kind = raw.get("kind", "maml").strip()
    if "pool" in raw:
        pool = pool or _bool(raw["pool"], "pool")
    if kind == "erm":
        return (MetaMethod.erm(pool=pool),)
    if kind == "maml":
        return tuple(MetaMethod.maml(a) for a in _numbers(raw.get("alpha", "0.1"), "alpha"))
    if kind == "imaml":
        return tuple(MetaMethod.imaml(g) for g in _numbers(raw.get("gamma", "1"), "gamma"))
    raise UserError(f"method kind must be erm, maml or imaml, got {kind!r}")


def _int(raw: dict, key: str, default: int) -> int:
    try:
        return int(raw.get(key, default))
    except ValueError as exc:
        raise UserError(f"{key} = {raw[key]!r} is not an integer") from exc


def _float(raw: dict, key: str, default: float) -> float:
    try:
        return float(raw.get(key, default))
    except ValueError as exc:
        raise UserError(f"{key} = {raw[key]!r} is not a number") from exc


def resolved_ini(sections: dict[str, dict]) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name, values in sections.items():
        parser[name] = {k: str(v) for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue().strip()


def _commented(text: str) -> str:
    return "".join(f"# {line}\n" for line in text.splitlines() if line.strip())


SOLVE_FIELDS = (
    "d", "M", "N", "seed", "rank", "degenerate", "train_loss", "theta0_hat_norm", "excess_risk", "excess_mc",
    "mc_stderr", "population_risk", "cross_task_variance", "bias", "per_task_variance", "r0", "k_star",
    "R_kstar", "V", "bound_total",
)


def cmd_solve(args) -> int:
    ini = load_ini(args.config)
    env_t = _env(ini)
    methods = _methods(ini["method"], args.erm_pool)
    if len(methods) != 1:
        raise UserError("solve takes exactly one alpha or gamma")
    method = methods[0]
    sw = ini["sweep"]
    M, N = _int(sw, "M", 10), _int(sw, "N", 10)
    seed = args.seed if args.seed is not None else _int(sw, "seed", 0)
    mc_draws = _int(sw, "mc_draws", 4000)
    c1 = args.c1 if args.c1 is not None else _float(sw, "c1", 1.0)
    out_path = args.out or ini["output"].get("path")
    dump = args.dump_theta or _bool(ini["output"].get("dump_theta", "false"), "dump_theta")

    env = env_t.build()
    ds = sample_meta_dataset(env, M, N, dataset_stream(seed, 0))
    sol = min_norm_solve(method, ds)
    pop = population_solution(method, env)
    risk = excess_risk(sol, pop, MonteCarlo(mc_draws, seed))
    dec = decompose(ds, method, pop, sol)
    report = spectrum_report(pop.weight.eigvals, M * N, c1)
    v = dataset_heterogeneity(ds)
    bound = theorem_bound(report, env_t.mean_norm, env.sigma_noise, M * N, 0.0 if math.isnan(v) else v)
    values = dict(
        d=env.dim, M=M, N=N, seed=seed, rank=sol.rank, degenerate=int(sol.degenerate), train_loss=sol.train_loss,
        theta0_hat_norm=float(np.linalg.norm(sol.theta0_hat)), excess_risk=risk.excess_risk,
        excess_mc=risk.excess_via_mc, mc_stderr=risk.mc_stderr, population_risk=risk.population_risk,
        cross_task_variance=dec.cross_task_variance, bias=dec.bias, per_task_variance=dec.per_task_variance,
        r0=report.r0, k_star=-1 if bound.k_star is None else bound.k_star,
        R_kstar=math.nan if bound.k_star is None else float(report.R[bound.k_star]), V=v,
        bound_total=bound.total,
    )
    if not all(math.isfinite(float(values[k])) for k in ("excess_risk", "cross_task_variance", "bias", "per_task_variance")):
        return _fail(EXIT_NUMERIC, "NumericError", "non-finite risk or decomposition term")

    resolved = {
        "env": dataclasses.asdict(env_t),
        "method": {"kind": method.kind, "alpha": method.alpha, "gamma": method.gamma, "pool": method.pool},
        "sweep": {"M": M, "N": N, "seed": seed, "mc_draws": mc_draws, "c1": c1},
    }
    buf = io.StringIO()
    buf.write(header_line("solve", seed) + "\n")
    buf.write(_commented(resolved_ini(resolved)))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SOLVE_FIELDS)
    w.writerow([_fmt(values[k]) for k in SOLVE_FIELDS])

    theta_text = None
    if dump:
        tb = io.StringIO()
        tb.write(header_line("theta", seed) + "\n")
        tw = csv.writer(tb, lineterminator="\n")
        tw.writerow(["index", "theta0_hat", "theta0_star"])
        for i, (a, b) in enumerate(zip(sol.theta0_hat, pop.theta0_star)):
            tw.writerow([i, _fmt(a), _fmt(b)])
        theta_text = tb.getvalue()

    if out_path:
        parent = os.path.dirname(os.path.abspath(out_path))
        if not os.path.isdir(parent):
            raise UserError(f"output directory {parent!r} does not exist")
        files = {out_path: buf.getvalue()}
        if theta_text is not None:
            files[os.path.splitext(out_path)[0] + ".theta.csv"] = theta_text
        _atomic_write_all(files)
    else:
        sys.stdout.write(buf.getvalue())
        if theta_text is not None:
            sys.stdout.write(theta_text)
    return EXIT_OK


def _finish_sweep(config: SweepConfig, out_dir: str, workers: int | None, charts: bool = True) -> int:
    if not out_dir or not os.path.isdir(out_dir):
        raise UserError(f"output directory {out_dir!r} does not exist")
    workers = default_workers() if workers is None else workers
    start = time.perf_counter()
    records = run_sweep(config, workers)
    elapsed = time.perf_counter() - start
    paths = write_outputs(config, records, out_dir, workers, elapsed, charts)
    failed = sum(r.status != "ok" for r in records)
    for p in paths:
        print(p)
    if failed:
        print(f"metabenign: warning: {failed} of {len(records)} records failed", file=sys.stderr)
    if failed == len(records):
        return _fail(EXIT_NUMERIC, "NumericError", "every sweep record failed")
    return EXIT_OK


def _apply_pool(config: SweepConfig) -> SweepConfig:
    panels = tuple(
        dataclasses.replace(p, methods=tuple(MetaMethod.erm(pool=True) if m.kind == "erm" else m for m in p.methods))
        for p in config.panels
    )
    return dataclasses.replace(config, panels=panels)


def cmd_reproduce(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.seeds is not None:
        overrides["num_seeds"] = args.seeds
    if args.mc_draws is not None:
        overrides["mc_draws"] = args.mc_draws
    if args.c1 is not None:
        overrides["c1"] = args.c1
    if not os.path.isdir(args.out_dir):
        raise UserError(f"output directory {args.out_dir!r} does not exist")
    config = preset(args.figure, **overrides)
    if args.erm_pool:
        config = _apply_pool(config)
    return _finish_sweep(config, args.out_dir, args.workers)


def sweep_config_from_ini(ini: dict, erm_pool: bool = False) -> SweepConfig:
    env = _env(ini)
    methods = _methods(ini["method"], erm_pool)
    sw = ini["sweep"]
    x_axis = sw.get("x_axis", "N").strip()
    if "x_values" not in sw:
        raise UserError("[sweep] x_values is required")
    series_param = sw.get("series_param")
    if series_param is not None:
        series_param = ENV_KEYS.get(series_param.strip().lower(), series_param.strip())
    panel = PanelSpec(
        name=methods[0].kind,
        methods=methods,
        x_axis=x_axis,
        x_values=_numbers(sw["x_values"], "x_values", int),
        metric=sw.get("metric", "excess_risk").strip(),
        series_param=series_param,
        series_values=_numbers(sw.get("series_values", ""), "series_values"),
        logx=x_axis in ("N", "d"),
    )
    return SweepConfig(
        name=sw.get("name", "sweep").strip(),
        env=env,
        panels=(panel,),
        M=_int(sw, "M", 10),
        N=_int(sw, "N", 10),
        num_seeds=_int(sw, "num_seeds", 20),
        master_seed=_int(sw, "seed", 0),
        mc_draws=_int(sw, "mc_draws", 4000),
        c1=_float(sw, "c1", 1.0),
    )


def cmd_sweep(args) -> int:
    ini = load_ini(args.config)
    config = sweep_config_from_ini(ini, args.erm_pool)
    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.c1 is not None:
        overrides["c1"] = args.c1
    if overrides:
        config = dataclasses.replace(config, **overrides)
    out_dir = args.out_dir or ini["output"].get("out_dir")
    charts = _bool(ini["output"].get("charts", "true"), "charts")
    return _finish_sweep(config, out_dir, args.workers, charts)


def _method_from_flags(kind: str, hyper: float | None) -> MetaMethod:
    if kind == "maml":
        return MetaMethod.maml(0.1 if hyper is None else hyper)
    if kind == "imaml":
        return MetaMethod.imaml(1.0 if hyper is None else hyper)
    return MetaMethod.erm()


def cmd_analyze(args) -> int:
    spectra = []
    for path in args.spectrum:
        try:
            spectra.append(read_spectrum_csv(path))
        except OSError as exc:
            raise UserError(f"cannot read {path!r}: {exc.strerror}") from exc
        except SpectrumError as exc:
            raise UserError(f"{path}: {exc}") from exc
    if len({s.size for s in spectra}) != 1:
        raise UserError("spectra have different dimensions")
    method = _method_from_flags(args.method, args.hyper)
    c1 = 1.0 if args.c1 is None else args.c1
    if c1 < 1:
        raise UserError("c1 must be >= 1")
    v = heterogeneity(np.vstack(spectra)) if len(spectra) > 1 else None
    base = np.mean(np.vstack(spectra), axis=0)
    weight = eig_map(method, base)
    rep = spectrum_report(weight, args.nm, c1, v)
    r0_ratio, k_ratio, big_r_ratio = rep.ratios
    lam1 = float(np.max(base))
    rows = [
        ("method", method.label),
        ("d", rep.eigvals.size),
        ("NM", args.nm),
        ("c1", c1),
        ("mu_1", rep.op_norm),
        ("trace", rep.trace),
        ("r_0", rep.r0),
        ("k_star", "none" if rep.k_star is None else rep.k_star),
        ("R_k_star", rep.R_kstar),
        ("ratio_r0_over_NM", r0_ratio),
        ("ratio_kstar_over_NM", k_ratio),
        ("ratio_NM_over_R", big_r_ratio),
        ("heterogeneity_V", "n/a" if v is None else v),
        ("hyperparameter_safe", hyperparameter_safe(method, lam1) if lam1 > 0 else "n/a"),
    ]
    for k, val in rows:
        print(f"{k}: {_fmt(val)}")
    if args.out:
        buf = io.StringIO()
        buf.write(header_line("analyze", 0) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["key", "value"])
        for k, val in rows:
            w.writerow([k, _fmt(val)])
        parent = os.path.dirname(os.path.abspath(args.out))
        if not os.path.isdir(parent):
            raise UserError(f"output directory {parent!r} does not exist")
        _atomic_write_all({args.out: buf.getvalue()})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metabenign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        if seed:
            p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--c1", type=float, help="effective-dimension constant (>= 1)")
        p.add_argument("--erm-pool", action="store_true", help="ERM fits train and validation rows together")

    p = sub.add_parser("reproduce", help="run a figure preset")
    p.add_argument("figure", choices=PRESETS)
    p.add_argument("out_dir")
    p.add_argument("--seeds", type=int, help="seeds per cell")
    p.add_argument("--mc-draws", type=int, help="Monte-Carlo task draws per excess-risk estimate")
    p.add_argument("--workers", type=int, help="worker processes (default: $METABENIGN_WORKERS or 1)")
    common(p)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("analyze", help="effective ranks and benign ratios of a spectrum")
    p.add_argument("spectrum", nargs="+", help="CSV file(s), one eigenvalue per line, descending")
    p.add_argument("--nm", type=int, required=True, help="total samples N*M")
    p.add_argument("--method", choices=("erm", "maml", "imaml"), default="erm")
    p.add_argument("--hyper", type=float, help="alpha for maml, gamma for imaml")
    p.add_argument("--c1", type=float, help="effective-dimension constant (>= 1)")
    p.add_argument("--out", help="also write the report as CSV")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("solve", help="solve one seeded meta-learning instance")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.add_argument("--dump-theta", action="store_true", help="also write theta0_hat and theta0")
    common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep", help="run a sweep described by a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir")
    p.add_argument("--workers", type=int)
    common(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UserError, ConfigError, SpectrumError) as exc:
        return _fail(EXIT_USER, type(exc).__name__, str(exc))
    except (np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
        return _fail(EXIT_NUMERIC, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
