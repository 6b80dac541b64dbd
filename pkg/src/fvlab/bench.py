"""Benchmark orchestration: error tables, win rates, convergence, heatmaps.

Reports are plain data. CSV outputs avoid timestamps and machine-specific
content so equal seeds give byte-identical files; pixmaps are binary P6
with one pixel per space-time cell.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .exact import PiecewiseConstantIC, exact_reference
from .fluxes import FluxModel
from .grid import (
    BoundarySpec,
    ConfigError,
    Field,
    Grid1D,
    l1_error,
    l2_error,
    project_fine_to_coarse,
    rel_error,
)
from .schemes import InstabilityError, Scheme, rollout
from .training import EvalDataset, sample_eval_dataset, sample_eval_ics, training_grid

METRICS = ("l1", "l2", "rel")

_METRIC_FNS = {"l1": l1_error, "l2": l2_error, "rel": rel_error}


def eval_errors(
    scheme: Scheme,
    dataset: EvalDataset,
    metric: str = "l2",
    horizon: Optional[int] = None,
) -> np.ndarray:
    """Per-instance rollout error against the projected reference.

    Rollouts start from row 0 of the coarse reference with extrapolating
    boundaries; an unstable rollout scores inf rather than aborting the
    sweep.
    """
    fn = _METRIC_FNS[metric]
    grid = dataset.grid
    if horizon is not None and horizon != grid.n_steps:
        grid = Grid1D(dx=grid.dx, dt=grid.dt, n_cells=grid.n_cells,
                      n_steps=horizon, x0=grid.x0)
    errs = np.empty(len(dataset.entries))
    for k, (_, _, coarse) in enumerate(dataset.entries):
        ref = coarse
        if horizon is not None and horizon != dataset.grid.n_steps:
            ref = Field(grid, coarse.values[: horizon + 1])
        try:
            pred = rollout(scheme, dataset.model, coarse.values[0],
                           BoundarySpec(), grid, warn_cfl=False)
        except (InstabilityError, ConfigError, FloatingPointError):
            errs[k] = np.inf
            continue
        errs[k] = fn(ref, pred)
    return errs


@dataclass(frozen=True)
class BenchReport:
    """Per-scheme error lists plus aggregates over a shared eval set."""

    flux: str
    labels: tuple
    errors: dict  # metric -> {label: per-instance ndarray}
    mean: dict    # metric -> {label: float}
    std: dict
    metadata: dict = field(default_factory=dict)

    def recomputed_aggregates(self) -> tuple[dict, dict]:
        mean = {m: {lab: float(np.mean(v)) for lab, v in self.errors[m].items()}
                for m in self.errors}
        std = {m: {lab: float(np.std(v)) for lab, v in self.errors[m].items()}
               for m in self.errors}
        return mean, std

    def to_csv(self) -> str:
        lines = [f"#{k}={self.metadata[k]}" for k in sorted(self.metadata)]
        n = len(next(iter(self.errors["l2"].values())))
        head = ["flux", "scheme", "metric", "mean", "std"]
        head += [f"e{i}" for i in range(n)]
        lines.append(",".join(head))
        for metric in METRICS:
            for lab in self.labels:
                vals = self.errors[metric][lab]
                row = [self.flux, lab, metric,
                       format(self.mean[metric][lab], ".17g"),
                       format(self.std[metric][lab], ".17g")]
                row += [format(v, ".17g") for v in vals]
                lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def run_benchmark(
    model: FluxModel,
    schemes: Sequence[Scheme],
    n_instances: int = 100,
    seed: int = 1000,
    grid: Optional[Grid1D] = None,
    dataset: Optional[EvalDataset] = None,
) -> BenchReport:
    """Roll every scheme over a shared ten-jump eval set and tabulate errors."""
    if dataset is None:
        dataset = sample_eval_dataset(model, n_instances, seed, grid)
    labels = tuple(s.name for s in schemes)
    if len(set(labels)) != len(labels):
        raise ConfigError("duplicate scheme labels in benchmark")
    errors = {m: {} for m in METRICS}
    for scheme in schemes:
        for metric in METRICS:
            errors[metric][scheme.name] = eval_errors(scheme, dataset, metric)
    mean = {m: {lab: float(np.mean(v)) for lab, v in errors[m].items()}
            for m in errors}
    std = {m: {lab: float(np.std(v)) for lab, v in errors[m].items()}
           for m in errors}
    metadata = {
        "flux": model.name,
        "n_instances": len(dataset.entries),
        "seed": dataset.seed,
        "grid": f"dx={dataset.grid.dx:g},dt={dataset.grid.dt:g},"
                f"cells={dataset.grid.n_cells},steps={dataset.grid.n_steps}",
        "version": __version__,
    }
    return BenchReport(flux=model.name, labels=labels, errors=errors,
                       mean=mean, std=std, metadata=metadata)


@dataclass(frozen=True)
class WinRateMatrix:
    """entry[r, c]: fraction of instances where scheme r beats scheme c.

    Ties count one half; the diagonal holds nan.
    """

    labels: tuple
    matrix: np.ndarray

    def to_csv(self) -> str:
        lines = ["scheme," + ",".join(self.labels)]
        for lab, row in zip(self.labels, self.matrix):
            cells = ["" if np.isnan(v) else format(v, ".17g") for v in row]
            lines.append(lab + "," + ",".join(cells))
        return "\n".join(lines) + "\n"


def win_rate(report: BenchReport, metric: str = "l2") -> WinRateMatrix:
    if len(report.labels) < 2:
        raise ConfigError("win rate needs at least two schemes")
    errs = [report.errors[metric][lab] for lab in report.labels]
    n = len(report.labels)
    mat = np.full((n, n), np.nan)
    for r in range(n):
        for c in range(n):
            if r == c:
                continue
            wins = np.mean((errs[r] < errs[c]) + 0.5 * (errs[r] == errs[c]))
            mat[r, c] = float(wins)
    return WinRateMatrix(labels=report.labels, matrix=mat)


@dataclass(frozen=True)
class ConvergenceResult:
    """RMSE per time step size at fixed dt/dx, with a log-log slope fit."""

    dt_list: tuple
    rmse: tuple
    std: tuple
    slope: float
    excluded: tuple  # dt values dropped from the fit (unstable rollouts)

    def to_csv(self) -> str:
        lines = [f"#slope={format(self.slope, '.17g')}", "dt,rmse,std,excluded"]
        for dt, e, s in zip(self.dt_list, self.rmse, self.std):
            flag = int(dt in self.excluded)
            lines.append(f"{dt:.17g},{e:.17g},{s:.17g},{flag}")
        return "\n".join(lines) + "\n"


def convergence_sweep(
    scheme: Scheme,
    model: FluxModel,
    dt_list: Sequence[float],
    ratio: float = 0.1,
    n_instances: int = 20,
    seed: int = 1000,
    x_end: float = 1.0,
    t_end: float = 0.25,
    ics: Optional[Sequence[PiecewiseConstantIC]] = None,
    fine_fields: Optional[Sequence[Field]] = None,
) -> ConvergenceResult:
    """Refinement study at constant dt/dx over a fixed space-time window.

    References are solved exactly once on the finest grid in the sweep and
    projected to each coarser one, so every dt must divide t_end and keep
    dx = dt/ratio commensurate with the finest dx. The error statistic per
    dt is sqrt(mean squared error) averaged over instances; the slope is
    the least-squares fit of log10(rmse) against log10(dt). Unstable
    points are reported as inf and left out of the fit.
    """
    dts = sorted(float(dt) for dt in dt_list)
    if ics is None:
        ics = sample_eval_ics(model, n_instances, seed, (0.0, x_end))
    grids = []
    for dt in dts:
        dx = dt / ratio
        n_cells = int(round(x_end / dx))
        n_steps = int(round(t_end / dt))
        if abs(n_cells * dx - x_end) > 1e-9 * x_end or \
           abs(n_steps * dt - t_end) > 1e-9 * t_end:
            raise ConfigError(f"dt {dt:g} does not tile the window")
        grids.append(Grid1D(dx=dx, dt=dt, n_cells=n_cells, n_steps=n_steps))
    fine = grids[0]
    if fine_fields is None:
        fine_fields = [exact_reference(model, ic, fine) for ic in ics]
    rmse, stds, excluded = [], [], []
    for grid in grids:
        refs = (fine_fields if grid is fine
                else [project_fine_to_coarse(f, grid) for f in fine_fields])
        inst = np.empty(len(ics))
        for k, ref in enumerate(refs):
            try:
                pred = rollout(scheme, model, ref.values[0], BoundarySpec(),
                               grid, warn_cfl=False)
                inst[k] = l2_error(ref, pred)
            except (InstabilityError, ConfigError, FloatingPointError):
                inst[k] = np.inf
        if np.all(np.isfinite(inst)):
            rmse.append(float(np.sqrt(np.mean(inst))))
            stds.append(float(np.std(np.sqrt(inst))))
        else:
            rmse.append(np.inf)
            stds.append(np.inf)
            excluded.append(grid.dt)
    keep = [i for i, e in enumerate(rmse) if np.isfinite(e) and e > 0.0]
    if len(keep) >= 2:
        slope = float(np.polyfit(np.log10([dts[i] for i in keep]),
                                 np.log10([rmse[i] for i in keep]), 1)[0])
    else:
        slope = 0.0  # flat: nothing meaningful to fit
    return ConvergenceResult(dt_list=tuple(dts), rmse=tuple(rmse),
                             std=tuple(stds), slope=slope,
                             excluded=tuple(excluded))


# ---------------------------------------------------------------------------
# Heatmaps

# Piecewise-linear colormap: low density green, mid yellow, high red.
_CMAP_STOPS = np.array([[0, 160, 60], [250, 220, 40], [200, 30, 30]], float)


def _colormap(values: np.ndarray) -> np.ndarray:
    v = values * 2.0
    lo = np.clip(np.floor(v).astype(int), 0, 1)
    w = (v - lo)[..., None]
    rgb = (1.0 - w) * _CMAP_STOPS[lo] + w * _CMAP_STOPS[lo + 1]
    return np.round(rgb).clip(0, 255).astype(np.uint8)


def emit_heatmap(fld, path) -> None:
    """Binary P6 pixmap, one pixel per cell: x up, time rightward.

    Values outside [0, 1] are clamped with a warning.
    """
    values = fld.values if hasattr(fld, "values") else np.asarray(fld, float)
    if values.ndim != 2:
        raise ConfigError("heatmap input must be a 2-D field")
    if values.min() < 0.0 or values.max() > 1.0:
        warnings.warn("heatmap values outside [0, 1] were clamped")
        values = np.clip(values, 0.0, 1.0)
    # rows of the image run down from the top: last cell first
    pixels = _colormap(values.T[::-1])
    height, width = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
