"""Seeded, parallel parameter sweeps and the figure presets."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import multiprocessing
import os
import statistics
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .adaptation import MetaMethod
from .meta_solver import MonteCarlo, min_norm_solve, population_solution
from .risk import decompose, excess_risk, theorem_bound
from .spectrum import heterogeneity, spectrum_report
from .streams import RandomStream
from .svgplot import Chart, Series, render
from .task_model import (
    ConfigError,
    CovarianceSpec,
    ExplicitSpectrum,
    MetaDataset,
    Rotated,
    ScaledSpiked,
    SpikedIdentity,
    TaskEnvironment,
    benign_spectrum,
    sample_meta_dataset,
)

SCHEMA_VERSION = "metabenign/1"
WORKERS_ENV = "METABENIGN_WORKERS"
PATTERNS = ("spiked", "scaled", "benign")
ROTATIONS = ("none", "shared", "per_task")
X_AXES = ("N", "d", "M")
METRICS = (
    "excess_risk",
    "excess_mc",
    "population_risk",
    "cross_task_variance",
    "bias",
    "per_task_variance",
    "cross_ratio",
    "bound_total",
)
METRIC_LABELS = {
    "excess_risk": "excess risk",
    "excess_mc": "excess risk (Monte Carlo)",
    "population_risk": "population risk",
    "cross_task_variance": "cross-task variance",
    "bias": "bias",
    "per_task_variance": "per-task variance",
    "cross_ratio": "cross-task / per-task variance",
    "bound_total": "bound",
}


@dataclass(frozen=True)
class EnvTemplate:
    """Flat, serializable description of a :class:`TaskEnvironment`.

    ``mean_norm`` sets ``E[theta_m] = mean_norm / sqrt(d) * ones``.
    """

    d: int = 200
    pattern: str = "spiked"
    d1: int = 20
    beta: float = 1.0
    sigma_omega: float = 0.0
    R: float = 1.0
    mean_norm: float = 0.0
    sigma_noise: float = 1.0
    family: str = "gaussian"
    split: float = 0.5
    rotation: str = "none"
    rotation_seed: int = 0

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ConfigError(f"pattern must be one of {PATTERNS}, got {self.pattern!r}")
        if self.rotation not in ROTATIONS:
            raise ConfigError(f"rotation must be one of {ROTATIONS}, got {self.rotation!r}")

    def covariance(self) -> CovarianceSpec:
        if self.pattern == "spiked":
            base = SpikedIdentity(self.d1, self.beta)
        elif self.pattern == "scaled":
            base = ScaledSpiked(self.d1, self.beta, self.sigma_omega)
        else:
            base = ExplicitSpectrum(benign_spectrum(self.d))
        if self.rotation != "none":
            base = Rotated(base, self.rotation_seed, per_task=self.rotation == "per_task")
        return CovarianceSpec(self.d, base)

    def build(self) -> TaskEnvironment:
        mean = None if self.mean_norm == 0 else np.full(self.d, self.mean_norm / math.sqrt(self.d))
        return TaskEnvironment(
            cov=self.covariance(),
            R=self.R,
            theta_mean=mean,
            sigma_noise=self.sigma_noise,
            family=self.family,
            split=self.split,
        )


@dataclass(frozen=True)
class PanelSpec:
    """One chart: a set of series over one x axis.

    Series are the methods, or (when ``series_param`` is set) the values of one
    :class:`EnvTemplate` field crossed with the methods.
    """

    name: str
    methods: tuple[MetaMethod, ...]
    x_axis: str = "N"
    x_values: tuple[int, ...] = ()
    metric: str = "excess_risk"
    series_param: str | None = None
    series_values: tuple[float, ...] = ()
    env: EnvTemplate | None = None
    logx: bool = False
    logy: bool = False


@dataclass(frozen=True)
class Cell:
    index: int
    panel: str
    series: str
    method: MetaMethod
    env: EnvTemplate
    M: int
    N: int
    x_axis: str
    x: int


@dataclass(frozen=True)
class SweepConfig:
    name: str
    env: EnvTemplate
    panels: tuple[PanelSpec, ...]
    M: int = 10
    N: int = 10
    num_seeds: int = 20
    master_seed: int = 0
    mc_draws: int = 4000
    c1: float = 1.0
    paper_unstated: tuple[str, ...] = ()
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.num_seeds < 1:
            raise ConfigError("num_seeds must be >= 1")
        if self.mc_draws < 2:
            raise ConfigError("mc_draws must be >= 2")
        if self.c1 < 1:
            raise ConfigError("c1 must be >= 1")
        if not self.panels:
            raise ConfigError("a sweep needs at least one panel")
        for p in self.panels:
            if p.x_axis not in X_AXES:
                raise ConfigError(f"x_axis must be one of {X_AXES}, got {p.x_axis!r}")
            if p.metric not in METRICS:
                raise ConfigError(f"metric must be one of {METRICS}, got {p.metric!r}")
            if not p.methods or not p.x_values:
                raise ConfigError(f"panel {p.name!r} needs methods and x values")
            if p.series_param is not None:
                names = {f.name for f in dataclasses.fields(EnvTemplate)}
                if p.series_param not in names:
                    raise ConfigError(f"unknown series parameter {p.series_param!r}")
                if not p.series_values:
                    raise ConfigError(f"panel {p.name!r} has a series parameter but no values")
        for cell in self.cells():
            env = cell.env.build()
            env.split_sizes(cell.N)
            if cell.M < 1:
                raise ConfigError("M must be >= 1")

    def cells(self) -> list[Cell]:
        out = []
        for p in self.panels:
            base = p.env or self.env
            combos = []
            for method in p.methods:
                if p.series_param is None:
                    combos.append((method.label, method, base))
                    continue
                for v in p.series_values:
                    label = f"{p.series_param}={v:g}"
                    if len(p.methods) > 1:
                        label = f"{method.label} {label}"
                    combos.append((label, method, dataclasses.replace(base, **{p.series_param: v})))
            for label, method, env in combos:
                for x in p.x_values:
                    m, n, cell_env = self.M, self.N, env
                    if p.x_axis == "N":
                        n = int(x)
                    elif p.x_axis == "M":
                        m = int(x)
                    else:
                        cell_env = dataclasses.replace(env, d=int(x))
                    out.append(Cell(len(out), p.name, label, method, cell_env, m, n, p.x_axis, int(x)))
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class SweepRecord:
    cell: int
    panel: str
    series: str
    method: str
    hyper: float
    x_axis: str
    x: int
    d: int
    M: int
    N: int
    seed: int
    status: str
    reason: str
    excess_risk: float
    excess_mc: float
    mc_stderr: float
    population_risk: float
    cross_task_variance: float
    bias: float
    per_task_variance: float
    cross_ratio: float
    train_loss: float
    rank: int
    r0: float
    k_star: int
    R_kstar: float
    V: float
    bound_bias: float
    bound_variance: float
    bound_total: float
    wall_time: float = field(default=0.0, compare=False)


RECORD_FIELDS = tuple(f.name for f in dataclasses.fields(SweepRecord) if f.name != "wall_time")
_NAN_FIELDS = RECORD_FIELDS[RECORD_FIELDS.index("excess_risk"):]


def _mc_seed(master: int, seed: int) -> int:
    seq = np.random.SeedSequence(entropy=master, spawn_key=(zlib.crc32(b"mc"), seed))
    return int(seq.generate_state(1)[0])


def dataset_stream(master_seed: int, seed: int) -> RandomStream:
    """Seed ``s`` draws the same tasks in every cell (common random numbers across the grid)."""
    return RandomStream(master_seed).child("dataset", seed)


def dataset_heterogeneity(dataset: MetaDataset) -> float:
    if not dataset.env.cov.shared_basis:
        return math.nan
    return heterogeneity([t.cov.eigvals for t in dataset.tasks])


def _failed(cell: Cell, seed: int, reason: str, wall: float = 0.0) -> SweepRecord:
    values = {name: (-1 if name in ("rank", "k_star") else math.nan) for name in _NAN_FIELDS}
    return SweepRecord(
        cell.index, cell.panel, cell.series, cell.method.kind, cell.method.hyper, cell.x_axis, cell.x,
        cell.env.d, cell.M, cell.N, seed, "error", reason.replace("\n", " "), wall_time=wall, **values,
    )


def run_cell(cell: Cell, config: SweepConfig) -> list[SweepRecord]:
    """All seeds of one grid cell; failures become records, never exceptions."""
    nm = cell.M * cell.N
    try:
        env = cell.env.build()
        pop = population_solution(cell.method, env)
        report = spectrum_report(pop.weight.eigvals, nm, config.c1)
    except (ConfigError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return [_failed(cell, s, f"{type(exc).__name__}: {exc}") for s in range(config.num_seeds)]
    out = []
    for s in range(config.num_seeds):
        start = time.perf_counter()
        try:
            ds = sample_meta_dataset(env, cell.M, cell.N, dataset_stream(config.master_seed, s))
            sol = min_norm_solve(cell.method, ds)
            risk = excess_risk(sol, pop, MonteCarlo(config.mc_draws, _mc_seed(config.master_seed, s)))
            dec = decompose(ds, cell.method, pop, sol)
            v = dataset_heterogeneity(ds)
            bound = theorem_bound(report, cell.env.mean_norm, env.sigma_noise, nm, 0.0 if math.isnan(v) else v)
            ratio = dec.cross_task_variance / dec.per_task_variance if dec.per_task_variance > 0 else math.nan
            out.append(
                SweepRecord(
                    cell.index, cell.panel, cell.series, cell.method.kind, cell.method.hyper, cell.x_axis,
                    cell.x, env.dim, cell.M, cell.N, s, "ok", "",
                    excess_risk=risk.excess_risk,
                    excess_mc=risk.excess_via_mc,
                    mc_stderr=risk.mc_stderr,
                    population_risk=risk.population_risk,
                    cross_task_variance=dec.cross_task_variance,
                    bias=dec.bias,
                    per_task_variance=dec.per_task_variance,
                    cross_ratio=ratio,
                    train_loss=sol.train_loss,
                    rank=sol.rank,
                    r0=report.r0,
                    k_star=-1 if bound.k_star is None else bound.k_star,
                    R_kstar=math.nan if bound.k_star is None else float(report.R[bound.k_star]),
                    V=v,
                    bound_bias=bound.bias_term,
                    bound_variance=bound.variance_term,
                    bound_total=bound.total,
                    wall_time=time.perf_counter() - start,
                )
            )
        except (ConfigError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            out.append(_failed(cell, s, f"{type(exc).__name__}: {exc}", time.perf_counter() - start))
    return out


def _run_cell_packed(args):
    return run_cell(*args)


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


def run_sweep(config: SweepConfig, workers: int | None = None) -> list[SweepRecord]:
    """Every (cell, seed) record, ordered by cell then seed whatever the schedule."""
    workers = default_workers() if workers is None else workers
    cells = config.cells()
    if workers <= 1 or len(cells) == 1:
        batches = [run_cell(c, config) for c in cells]
    else:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            batches = list(pool.map(_run_cell_packed, [(c, config) for c in cells]))
    records = [r for batch in batches for r in batch]
    records.sort(key=lambda r: (r.cell, r.seed))
    return records


@dataclass(frozen=True)
class Stats:
    mean: float
    stderr: float
    median: float
    n: int
    n_excluded: int = 0


def summarize(values) -> Stats:
    """Mean, population-sd standard error and median over the finite values."""
    vals = [float(v) for v in values]
    finite = [v for v in vals if math.isfinite(v)]
    n = len(finite)
    if n == 0:
        return Stats(math.nan, math.nan, math.nan, 0, len(vals))
    mean = math.fsum(finite) / n
    var = math.fsum((v - mean) ** 2 for v in finite) / n
    return Stats(mean, math.sqrt(var) / math.sqrt(n), statistics.median(finite), n, len(vals) - n)


def aggregate(records, metrics=METRICS) -> dict[tuple, dict[str, Stats]]:
    """Per-cell statistics keyed by ``(cell, panel, series, x)``; failed records count as excluded."""
    groups: dict[tuple, list[SweepRecord]] = {}
    for r in records:
        groups.setdefault((r.cell, r.panel, r.series, r.x), []).append(r)
    out = {}
    for key in sorted(groups):
        rows = groups[key]
        out[key] = {m: summarize(getattr(r, m) if r.status == "ok" else math.nan for r in rows) for m in metrics}
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def header_line(kind: str, master_seed: int) -> str:
    return f"# schema={SCHEMA_VERSION} kind={kind} master_seed={master_seed}"


def records_csv(records, master_seed: int) -> str:
    buf = io.StringIO()
    buf.write(header_line("records", master_seed) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for r in records:
        w.writerow([_fmt(getattr(r, f)) for f in RECORD_FIELDS])
    return buf.getvalue()


def summary_csv(summary: dict, master_seed: int) -> str:
    buf = io.StringIO()
    buf.write(header_line("summary", master_seed) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell", "panel", "series", "x", "metric", "mean", "stderr", "median", "n", "n_excluded"])
    for (cell, panel, series, x), stats in summary.items():
        for metric, s in stats.items():
            w.writerow([cell, panel, series, x, metric] + [_fmt(v) for v in (s.mean, s.stderr, s.median, s.n, s.n_excluded)])
    return buf.getvalue()


def timings_csv(records, master_seed: int) -> str:
    buf = io.StringIO()
    buf.write(header_line("timings", master_seed) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell", "seed", "wall_time"])
    for r in records:
        w.writerow([r.cell, r.seed, _fmt(r.wall_time)])
    return buf.getvalue()


def panel_charts(config: SweepConfig, summary: dict) -> dict[str, Chart]:
    charts = {}
    for p in config.panels:
        series: dict[str, Series] = {}
        for (_, panel, label, x), stats in summary.items():
            if panel != p.name:
                continue
            s = series.setdefault(label, Series(label, [], [], []))
            st = stats[p.metric]
            s.x.append(float(x))
            s.y.append(st.mean)
            s.err.append(st.stderr)
        ylabel = METRIC_LABELS[p.metric]
        title = f"{config.name}: {p.name}"
        charts[p.name] = Chart(title, p.x_axis, f"mean {ylabel} (+/- stderr)", list(series.values()), p.logx, p.logy)
    return charts


def manifest(config: SweepConfig, records, workers: int, elapsed: float) -> dict:
    failed = sum(r.status != "ok" for r in records)
    return {
        "schema": SCHEMA_VERSION,
        "master_seed": config.master_seed,
        "library_version": __version__,
        "config": config.to_dict(),
        "paper_unstated": list(config.paper_unstated),
        "notes": list(config.notes),
        "records": len(records),
        "failed_records": failed,
        "workers": workers,
        "elapsed_seconds": elapsed,
    }


def _atomic_write_all(files: dict[str, str]) -> None:
    tmp = {}
    try:
        for path, text in files.items():
            t = f"{path}.tmp-{os.getpid()}"
            with open(t, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            tmp[path] = t
        for path, t in tmp.items():
            os.replace(t, path)
    finally:
        for t in tmp.values():
            if os.path.exists(t):
                os.remove(t)


def write_outputs(config: SweepConfig, records, out_dir, workers: int = 1, elapsed: float = 0.0, charts: bool = True) -> list[str]:
    """Write records, summary, timings, manifest and one SVG per panel; returns the paths."""
    if not os.path.isdir(out_dir):
        raise FileNotFoundError(f"output directory {out_dir!r} does not exist")
    summary = aggregate(records)
    seed = config.master_seed
    files = {
        os.path.join(out_dir, "records.csv"): records_csv(records, seed),
        os.path.join(out_dir, "summary.csv"): summary_csv(summary, seed),
        os.path.join(out_dir, "timings.csv"): timings_csv(records, seed),
        os.path.join(out_dir, "manifest.json"): json.dumps(manifest(config, records, workers, elapsed), indent=2) + "\n",
    }
    if charts:
        head = f"schema={SCHEMA_VERSION} kind=chart master_seed={seed}"
        for name, chart in panel_charts(config, summary).items():
            files[os.path.join(out_dir, f"{config.name}_{name}.svg")] = render(chart, head)
    _atomic_write_all(files)
    return list(files)


_COMMON_UNSTATED = ("sigma_noise=1", "R=1", "num_seeds=20", "split s=0.5", "Gaussian family", "no rotation")
_EXAMPLE_N = (2, 4, 6, 8, 10, 12, 14, 16, 18)


def _log_grid(lo: int, hi: int, num: int) -> tuple[int, ...]:
    return tuple(sorted({int(round(v)) for v in np.geomspace(lo, hi, num)}))


def preset(name: str, **overrides) -> SweepConfig:
    """Figure configurations; keyword overrides replace top-level :class:`SweepConfig` fields."""
    if name == "fig3_double_descent":
        cfg = SweepConfig(
            name=name,
            env=EnvTemplate(d=200, pattern="spiked", d1=0, beta=1.0, mean_norm=1.0),
            panels=(
                PanelSpec("maml", tuple(MetaMethod.maml(a) for a in (0.05, 0.1, 0.3)), "N", _log_grid(2, 200, 15),
                          logx=True, logy=True),
                PanelSpec("imaml", tuple(MetaMethod.imaml(g) for g in (1.0, 10.0, 1000.0)), "N", _log_grid(2, 200, 15),
                          logx=True, logy=True),
            ),
            M=10,
            paper_unstated=_COMMON_UNSTATED + (
                "identity covariance", "alpha grid {0.05, 0.1, 0.3}", "gamma grid {1, 10, 1000}",
                "N grid log-spaced 2..200", "||E theta|| = 1",
            ),
            notes=(
                "Both excess_risk and population_risk are recorded; charts show excess risk.",
            ),
        )
    elif name == "fig4_example1":
        cfg = SweepConfig(
            name=name,
            env=EnvTemplate(d=200, pattern="spiked", d1=20, mean_norm=1.0),
            panels=tuple(
                PanelSpec(label, (m,), "N", _EXAMPLE_N, series_param="beta", series_values=(0.1, 0.3, 0.6, 1.0))
                for label, m in (("maml", MetaMethod.maml(0.1)), ("imaml", MetaMethod.imaml(1e3)))
            ),
            M=10,
            paper_unstated=_COMMON_UNSTATED + ("beta grid {0.1, 0.3, 0.6, 1.0}", "N grid 2..18", "||E theta|| = 1"),
        )
    elif name == "fig5_example2":
        cfg = SweepConfig(
            name=name,
            env=EnvTemplate(d=200, pattern="scaled", d1=20, beta=0.3, mean_norm=1.0),
            panels=tuple(
                PanelSpec(label, (m,), "N", _EXAMPLE_N, series_param="sigma_omega", series_values=(0.1, 0.5, 1.0))
                for label, m in (("maml", MetaMethod.maml(0.1)), ("imaml", MetaMethod.imaml(0.1)))
            ),
            M=10,
            paper_unstated=_COMMON_UNSTATED + ("sigma_omega grid {0.1, 0.5, 1.0}", "N grid 2..18", "||E theta|| = 1"),
        )
    elif name == "fig6_lemmas":
        cfg = SweepConfig(
            name=name,
            env=EnvTemplate(d=100, pattern="benign", mean_norm=1.0),
            panels=(
                PanelSpec("cross_ratio_vs_d", (MetaMethod.maml(0.1),), "d", (100, 200, 400, 800, 1600),
                          metric="cross_ratio", logx=True, logy=True),
                PanelSpec("bias_vs_M", (MetaMethod.maml(0.1),), "M", (2, 5, 10, 15, 20, 30, 40), metric="bias"),
            ),
            M=5,
            N=10,
            paper_unstated=_COMMON_UNSTATED + (
                "covariance lambda_i = 1/(i log^2(i+1))", "MAML alpha=0.1", "d grid {100..1600}",
                "M grid {2..40} at d=100", "||E theta|| = 1",
            ),
        )
    else:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


PRESETS = ("fig3_double_descent", "fig4_example1", "fig5_example2", "fig6_lemmas")
