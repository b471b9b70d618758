import csv
import io
import json
import math

import numpy as np
import pytest

from metabenign.adaptation import MetaMethod
from metabenign.experiments import (
    PRESETS,
    RECORD_FIELDS,
    SCHEMA_VERSION,
    EnvTemplate,
    PanelSpec,
    SweepConfig,
    aggregate,
    dataset_stream,
    default_workers,
    preset,
    records_csv,
    run_cell,
    run_sweep,
    summarize,
    write_outputs,
)
from metabenign.meta_solver import MonteCarlo, min_norm_solve, population_solution
from metabenign.risk import decompose, excess_risk
from metabenign.task_model import ConfigError, sample_meta_dataset


def _small(**kw):
    env = EnvTemplate(d=20, pattern="spiked", d1=4, beta=0.5, mean_norm=1.0)
    panels = (PanelSpec("p", (MetaMethod.maml(0.1), MetaMethod.imaml(1.0)), "N", (4, 8)),)
    base = dict(name="tiny", env=env, panels=panels, M=3, num_seeds=2, mc_draws=200)
    base.update(kw)
    return SweepConfig(**base)


def test_summarize_reference_values():
    s = summarize([1.0, 2.0, 3.0])
    assert s.mean == 2.0 and s.median == 2.0 and s.n == 3
    assert s.stderr == pytest.approx(math.sqrt(2 / 3) / math.sqrt(3))
    assert round(s.stderr, 3) == 0.471


def test_summarize_excludes_non_finite():
    s = summarize([1.0, math.nan, 3.0, math.inf])
    assert s.n == 2 and s.n_excluded == 2 and s.mean == 2.0
    empty = summarize([math.nan])
    assert empty.n == 0 and math.isnan(empty.mean)


def test_single_cell_matches_direct_chain():
    cfg = _small(num_seeds=1)
    cell = cfg.cells()[0]
    (rec,) = run_cell(cell, cfg)
    env = cell.env.build()
    ds = sample_meta_dataset(env, cell.M, cell.N, dataset_stream(cfg.master_seed, 0))
    pop = population_solution(cell.method, env)
    sol = min_norm_solve(cell.method, ds)
    assert rec.status == "ok"
    assert rec.excess_risk == pop.weight.quad(sol.theta0_hat - pop.theta0_star)
    dec = decompose(ds, cell.method, pop, sol)
    assert (rec.cross_task_variance, rec.bias, rec.per_task_variance) == (
        dec.cross_task_variance, dec.bias, dec.per_task_variance)
    assert rec.rank == sol.rank and rec.V == 0.0


def test_common_random_numbers_across_cells():
    cfg = _small(num_seeds=1)
    a, b = cfg.cells()[0], cfg.cells()[2]
    assert a.N == b.N and a.method != b.method
    da = sample_meta_dataset(a.env.build(), a.M, a.N, dataset_stream(0, 0))
    db = sample_meta_dataset(b.env.build(), b.M, b.N, dataset_stream(0, 0))
    np.testing.assert_array_equal(da.tasks[0].x_train, db.tasks[0].x_train)


def test_cells_layout():
    cfg = preset("fig4_example1")
    cells = cfg.cells()
    assert len(cells) == 2 * 4 * 9
    assert [c.index for c in cells] == list(range(len(cells)))
    assert {c.env.beta for c in cells} == {0.1, 0.3, 0.6, 1.0}
    d_cells = preset("fig6_lemmas").cells()
    assert {c.env.d for c in d_cells if c.x_axis == "d"} == {100, 200, 400, 800, 1600}
    assert {c.M for c in d_cells if c.x_axis == "M"} == {2, 5, 10, 15, 20, 30, 40}


def test_workers_give_identical_outputs(tmp_path):
    cfg = _small()
    one, two = tmp_path / "w1", tmp_path / "w2"
    one.mkdir()
    two.mkdir()
    write_outputs(cfg, run_sweep(cfg, workers=1), one, workers=1)
    write_outputs(cfg, run_sweep(cfg, workers=2), two, workers=2)
    for name in ("records.csv", "summary.csv", "tiny_p.svg"):
        assert (one / name).read_bytes() == (two / name).read_bytes()


def test_outputs_have_headers(tmp_path):
    cfg = _small(num_seeds=1)
    paths = write_outputs(cfg, run_sweep(cfg, workers=1), tmp_path)
    for name in ("records.csv", "summary.csv", "timings.csv"):
        first = (tmp_path / name).read_text().splitlines()[0]
        assert first.startswith(f"# schema={SCHEMA_VERSION} kind=") and first.endswith("master_seed=0")
    assert (tmp_path / "tiny_p.svg").read_text().startswith("<!-- schema=")
    meta = json.loads((tmp_path / "manifest.json").read_text())
    assert meta["failed_records"] == 0 and meta["records"] == 4
    assert len(paths) == 5
    rows = list(csv.reader(io.StringIO((tmp_path / "records.csv").read_text())))
    assert tuple(rows[1]) == RECORD_FIELDS and "wall_time" not in rows[1]


def test_missing_directory(tmp_path):
    cfg = _small(num_seeds=1)
    with pytest.raises(FileNotFoundError):
        write_outputs(cfg, [], tmp_path / "absent")
    assert not (tmp_path / "absent").exists()


def test_failed_cells_become_records():
    # alpha = 1 on an identity covariance makes the mean weight singular
    env = EnvTemplate(d=10, pattern="spiked", d1=0, beta=1.0)
    cfg = SweepConfig("bad", env, (PanelSpec("p", (MetaMethod.maml(1.0),), "N", (4,)),), M=2, num_seeds=3, mc_draws=10)
    recs = run_sweep(cfg, workers=1)
    assert [r.status for r in recs] == ["error"] * 3
    assert "singular" in recs[0].reason and math.isnan(recs[0].excess_risk)
    stats = aggregate(recs)[(0, "p", "maml(alpha=1)", 4)]["excess_risk"]
    assert stats.n == 0 and stats.n_excluded == 3
    assert "error" in records_csv(recs, 0)


@pytest.mark.parametrize(
    "kw",
    [dict(num_seeds=0), dict(mc_draws=1), dict(c1=0.5), dict(panels=())],
)
def test_invalid_sweeps(kw):
    with pytest.raises(ConfigError):
        _small(**kw)


def test_invalid_panels():
    with pytest.raises(ConfigError):
        _small(panels=(PanelSpec("p", (MetaMethod.erm(),), "K", (4,)),))
    with pytest.raises(ConfigError):
        _small(panels=(PanelSpec("p", (MetaMethod.erm(),), "N", (1,)),))
    with pytest.raises(ConfigError):
        _small(panels=(PanelSpec("p", (MetaMethod.erm(),), "N", (4,), series_param="nope", series_values=(1,)),))
    with pytest.raises(ConfigError):
        EnvTemplate(pattern="weird")


def test_default_workers(monkeypatch):
    monkeypatch.setenv("METABENIGN_WORKERS", "3")
    assert default_workers() == 3
    monkeypatch.setenv("METABENIGN_WORKERS", "zero")
    with pytest.raises(ConfigError):
        default_workers()


def test_preset_values():
    fig3 = preset("fig3_double_descent")
    assert fig3.env.d == 200 and fig3.M == 10
    assert [m.alpha for m in fig3.panels[0].methods] == [0.05, 0.1, 0.3]
    assert [m.gamma for m in fig3.panels[1].methods] == [1.0, 10.0, 1000.0]
    assert fig3.panels[0].x_values[0] == 2 and fig3.panels[0].x_values[-1] == 200
    fig4 = preset("fig4_example1")
    assert fig4.env.d1 == 20 and fig4.env.d == 200
    assert fig4.panels[0].methods[0].alpha == 0.1 and fig4.panels[1].methods[0].gamma == 1e3
    assert fig4.panels[0].series_values == (0.1, 0.3, 0.6, 1.0)
    fig5 = preset("fig5_example2")
    assert fig5.env.beta == 0.3 and fig5.panels[1].methods[0].gamma == 0.1
    assert fig5.panels[0].series_values == (0.1, 0.5, 1.0)
    for name in PRESETS:
        cfg = preset(name)
        assert cfg.paper_unstated and cfg.num_seeds == 20
    assert preset("fig4_example1", num_seeds=3).num_seeds == 3
    with pytest.raises(ConfigError):
        preset("fig9")
