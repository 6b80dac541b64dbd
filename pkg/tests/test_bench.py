"""Tests for benchmark tables, win-rate matrices, convergence sweeps, and
P6 heatmaps. The heatmap bytes are pinned against a hand-computed golden
image so the renderer cannot drift silently."""

import warnings

import numpy as np
import pytest

from fvlab.bench import (
    BenchReport,
    ConvergenceResult,
    WinRateMatrix,
    convergence_sweep,
    emit_heatmap,
    eval_errors,
    run_benchmark,
    win_rate,
)
from fvlab.fluxes import make_flux
from fvlab.grid import ConfigError, Field, Grid1D
from fvlab.schemes import ENGQUIST_OSHER, GODUNOV, LAX_FRIEDRICHS, NEURAL, Scheme
from fvlab.training import sample_eval_dataset

GS = make_flux("greenshields")


class _ExplodingFlux:
    """Duck-typed neural flux whose rollouts always blow up."""

    a = 3
    b = 1
    label = "exploding"

    def flux_row(self, block):
        return np.full(block.shape[0], np.nan)


def small_dataset(n=4, n_cells=20, n_steps=5, seed=7):
    grid = Grid1D(dx=1e-2, dt=5e-3, n_cells=n_cells, n_steps=n_steps)
    return sample_eval_dataset(GS, n, seed=seed, grid=grid)


# ---------------------------------------------------------------------------
# eval_errors


def test_eval_errors_finite_and_horizon():
    ds = small_dataset()
    errs = eval_errors(Scheme(kind=GODUNOV), ds)
    assert errs.shape == (4,)
    assert np.all(np.isfinite(errs)) and np.all(errs > 0.0)
    full = eval_errors(Scheme(kind=GODUNOV), ds, horizon=ds.grid.n_steps)
    assert np.array_equal(full, errs)
    short = eval_errors(Scheme(kind=GODUNOV), ds, horizon=2)
    assert short.shape == (4,)
    assert not np.array_equal(short, errs)


def test_eval_errors_unstable_scores_inf():
    ds = small_dataset(n=2)
    errs = eval_errors(Scheme(kind=NEURAL, neural=_ExplodingFlux()), ds)
    assert np.all(np.isinf(errs))


# ---------------------------------------------------------------------------
# run_benchmark and BenchReport


def test_run_benchmark_aggregates_and_metadata():
    ds = small_dataset()
    schemes = [Scheme(kind=GODUNOV), Scheme(kind=LAX_FRIEDRICHS)]
    report = run_benchmark(GS, schemes, dataset=ds)
    assert report.labels == ("godunov", "lax_friedrichs")
    for metric in ("l1", "l2", "rel"):
        for lab in report.labels:
            assert report.errors[metric][lab].shape == (4,)
    mean, std = report.recomputed_aggregates()
    assert mean == report.mean and std == report.std
    assert report.metadata["flux"] == "greenshields"
    assert report.metadata["n_instances"] == 4
    # first-order upwinding beats the extra LF diffusion on average
    assert report.mean["l2"]["godunov"] < report.mean["l2"]["lax_friedrichs"]


def test_run_benchmark_rejects_duplicate_labels():
    ds = small_dataset(n=2)
    with pytest.raises(ConfigError):
        run_benchmark(GS, [Scheme(kind=GODUNOV), Scheme(kind=GODUNOV)], dataset=ds)


def test_bench_report_csv_layout():
    ds = small_dataset()
    report = run_benchmark(GS, [Scheme(kind=GODUNOV), Scheme(kind=ENGQUIST_OSHER)],
                           dataset=ds)
    lines = report.to_csv().splitlines()
    meta = [ln for ln in lines if ln.startswith("#")]
    assert meta == sorted(meta)
    head = lines[len(meta)]
    assert head == "flux,scheme,metric,mean,std,e0,e1,e2,e3"
    body = lines[len(meta) + 1 :]
    assert len(body) == 6  # 2 schemes x 3 metrics
    cells = body[0].split(",")
    assert cells[0] == "greenshields" and cells[2] == "l1"
    vals = np.array([float(c) for c in cells[5:]])
    assert float(cells[3]) == pytest.approx(vals.mean(), rel=1e-15)


def test_run_benchmark_deterministic():
    r1 = run_benchmark(GS, [Scheme(kind=GODUNOV)], n_instances=3, seed=42,
                       grid=Grid1D(dx=1e-2, dt=5e-3, n_cells=20, n_steps=4))
    r2 = run_benchmark(GS, [Scheme(kind=GODUNOV)], n_instances=3, seed=42,
                       grid=Grid1D(dx=1e-2, dt=5e-3, n_cells=20, n_steps=4))
    assert r1.to_csv() == r2.to_csv()


# ---------------------------------------------------------------------------
# Win rates


def _report_for_winrate(e_a, e_b):
    errs = {m: {"a": np.asarray(e_a, float), "b": np.asarray(e_b, float)}
            for m in ("l1", "l2", "rel")}
    return BenchReport(flux="greenshields", labels=("a", "b"), errors=errs,
                       mean={}, std={})


def test_win_rate_hand_oracle_with_ties():
    # a beats b on instances 0 and 3, loses instance 1, ties instance 2.
    report = _report_for_winrate([1.0, 2.0, 3.0, 4.0], [2.0, 1.0, 3.0, 5.0])
    wr = win_rate(report)
    assert wr.matrix[0, 1] == pytest.approx(0.625)
    assert wr.matrix[1, 0] == pytest.approx(0.375)
    assert np.isnan(wr.matrix[0, 0]) and np.isnan(wr.matrix[1, 1])


def test_win_rate_antisymmetry_random():
    rng = np.random.default_rng(3)
    report = _report_for_winrate(rng.uniform(size=50), rng.uniform(size=50))
    wr = win_rate(report)
    assert wr.matrix[0, 1] + wr.matrix[1, 0] == pytest.approx(1.0)
    lines = wr.to_csv().splitlines()
    assert lines[0] == "scheme,a,b"
    assert lines[1].split(",")[1] == ""  # nan diagonal prints empty


def test_win_rate_needs_two_schemes():
    errs = {m: {"solo": np.ones(3)} for m in ("l1", "l2", "rel")}
    lonely = BenchReport(flux="greenshields", labels=("solo",), errors=errs,
                         mean={}, std={})
    with pytest.raises(ConfigError):
        win_rate(lonely)


# ---------------------------------------------------------------------------
# Convergence sweeps


def test_convergence_sweep_refines_monotonically():
    result = convergence_sweep(
        Scheme(kind=GODUNOV), GS, dt_list=[5e-3, 1e-2], ratio=0.5,
        n_instances=5, seed=11, t_end=0.05,
    )
    assert result.dt_list == (5e-3, 1e-2)
    assert all(np.isfinite(result.rmse))
    assert result.rmse[0] < result.rmse[1]  # finer dt, smaller error
    assert result.slope > 0.0
    assert result.excluded == ()


def test_convergence_sweep_rejects_nontiling_dt():
    with pytest.raises(ConfigError):
        convergence_sweep(Scheme(kind=GODUNOV), GS, dt_list=[3e-3],
                          ratio=0.5, n_instances=2, t_end=0.05)


def test_convergence_sweep_excludes_unstable_points():
    result = convergence_sweep(
        Scheme(kind=NEURAL, neural=_ExplodingFlux()), GS,
        dt_list=[5e-3, 1e-2], ratio=0.5, n_instances=2, seed=1, t_end=0.05,
    )
    assert result.rmse == (np.inf, np.inf)
    assert set(result.excluded) == {5e-3, 1e-2}
    assert result.slope == 0.0


def test_convergence_csv_layout():
    result = ConvergenceResult(dt_list=(1e-3, 2e-3), rmse=(0.01, 0.02),
                               std=(0.001, 0.002), slope=1.0, excluded=(2e-3,))
    lines = result.to_csv().splitlines()
    assert lines[0] == "#slope=1"
    assert lines[1] == "dt,rmse,std,excluded"
    assert lines[2].split(",")[3] == "0"
    assert lines[3].split(",")[3] == "1"


# ---------------------------------------------------------------------------
# Heatmaps


def test_heatmap_golden_bytes(tmp_path):
    # 2x2 field; pixels hand-derived from the three colormap stops.
    grid = Grid1D(dx=1.0, dt=1.0, n_cells=2, n_steps=1)
    fld = Field(grid, np.array([[0.0, 0.5], [1.0, 0.25]]))
    path = tmp_path / "map.ppm"
    emit_heatmap(fld, path)
    want = b"P6\n2 2\n255\n" + bytes(
        [250, 220, 40, 125, 190, 50,   # top row: x=1 cells (t=0, t=1)
         0, 160, 60, 200, 30, 30]      # bottom row: x=0 cells
    )
    assert path.read_bytes() == want


def test_heatmap_clamps_with_warning(tmp_path):
    path = tmp_path / "c.ppm"
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        emit_heatmap(np.array([[-0.5, 1.5]]), path)
    assert any("clamped" in str(w.message) for w in caught)
    blob = path.read_bytes()
    assert blob == b"P6\n1 2\n255\n" + bytes([200, 30, 30, 0, 160, 60])


def test_heatmap_rejects_bad_rank(tmp_path):
    with pytest.raises(ConfigError):
        emit_heatmap(np.zeros(4), tmp_path / "x.ppm")
