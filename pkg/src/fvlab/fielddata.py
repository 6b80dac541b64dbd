"""Trajectory-to-density pipeline and flux calibration.

The pipeline turns per-vehicle trajectories (positions in miles, timestamps
in seconds) into normalized density fields:

    records -> bin_density -> raw veh/km/lane on a 0.02 mi x 0.1 s grid
            -> smooth_and_normalize -> block means (2 cells x 100 steps),
               capped at 140 veh/km/lane and divided by 140
            -> repair_gaps -> spatial gaps filled by per-step interpolation

Normalized fields live on a dimensionless grid (dx = dt = 1) so the same
rollout machinery used on synthetic benchmarks consumes them directly:
row 0 is the initial condition and the first/last columns serve as
prescribed boundary traces. calibrate_flux fits a flux family to a field
by minimizing the autoregressive rollout error of the conservative scheme
with exact interface fluxes, via seeded multi-start Nelder-Mead.

synth_trajectories generates desk-scale trajectory sets by integrating
vehicles through the exact entropy solution of a scenario initial
condition, so that binning the trajectories reproduces the generating
density up to quantization. Scenario speeds use toy units: the scenario
flux is Greenshields with v_max = 0.7 in computational units where the
window is one space unit and TIME_UNIT_S seconds are one time unit.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .exact import PiecewiseConstantIC, exact_reference
from .fluxes import FluxModel, evaluate, make_flux
from .grid import (
    PRESCRIBED_TRACES,
    BoundarySpec,
    ConfigError,
    Field,
    Grid1D,
)
from .schemes import GODUNOV, InstabilityError, Scheme, rollout

MI_TO_KM = 1.609344

# Raw binning grid and pooling factors; the pooled cells are 0.04 mi x 10 s.
RAW_DX_MI = 0.02
RAW_DT_S = 0.1
POOL_SPACE = 2
POOL_TIME = 100
DENSITY_CAP = 140.0  # veh/km/lane
LANES = 4

# Scenario geometry for synthetic trajectories: a 1 mile window observed for
# 600 s. One computational time unit is 250 s, so v_max = 0.7 computational
# units is 0.0028 mi/s; slow toy traffic keeps the pooled-grid CFL number of
# the calibration rollouts below one.
WINDOW_MI = 1.0
WINDOW_S = 600.0
TIME_UNIT_S = 250.0
SCENARIO_V_MAX = 0.7
SCENARIOS = ("free_flow", "stationary_jam", "stop_and_go")


# ---------------------------------------------------------------------------
# Trajectory records and newline-delimited JSON storage


@dataclass(frozen=True)
class TrajectoryRecord:
    """One vehicle: strictly increasing timestamps (s), positions (mi)."""

    vehicle_id: int
    timestamps: np.ndarray
    positions: np.ndarray
    lane: int

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        xs = np.asarray(self.positions, dtype=float)
        if ts.ndim != 1 or ts.shape != xs.shape:
            raise ConfigError("timestamps and positions must match in length")
        if ts.size < 2:
            raise ConfigError("a trajectory needs at least two samples")
        if not (np.all(np.isfinite(ts)) and np.all(np.isfinite(xs))):
            raise ConfigError("trajectory contains non-finite samples")
        if np.any(np.diff(ts) <= 0):
            raise ConfigError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "positions", xs)


def write_trajectories(records: Iterable[TrajectoryRecord], path) -> None:
    """One JSON object per line: vehicle_id, lane, timestamps, positions."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps({
                "vehicle_id": rec.vehicle_id,
                "lane": rec.lane,
                "timestamps": [round(t, 9) for t in rec.timestamps],
                "positions": [round(x, 9) for x in rec.positions],
            }, separators=(",", ":")))
            fh.write("\n")


def iter_trajectories(path) -> Iterator[TrajectoryRecord]:
    """Stream records one line at a time; files never load whole."""
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            yield TrajectoryRecord(
                vehicle_id=int(obj["vehicle_id"]),
                timestamps=np.asarray(obj["timestamps"], dtype=float),
                positions=np.asarray(obj["positions"], dtype=float),
                lane=int(obj["lane"]),
            )


def read_trajectories(path) -> list[TrajectoryRecord]:
    return list(iter_trajectories(path))


# ---------------------------------------------------------------------------
# Binning, pooling and gap repair


def bin_density(
    records: Sequence[TrajectoryRecord],
    x0: float = 0.0,
    x_end: float = WINDOW_MI,
    t0: float = 0.0,
    t_end: float = WINDOW_S,
    lanes: int = LANES,
) -> np.ndarray:
    """Count vehicles per raw cell; returns veh/km/lane, shape (time, space).

    Positions are linearly interpolated to each raw time instant
    t0 + k*RAW_DT_S; a vehicle contributes to the cell its interpolated
    position falls in. Counts aggregate across lanes and divide by the cell
    length in km times the lane count.
    """
    n_t = int(round((t_end - t0) / RAW_DT_S))
    n_x = int(round((x_end - x0) / RAW_DX_MI))
    if n_t < 1 or n_x < 1:
        raise ConfigError("binning window is empty")
    counts = np.zeros((n_t, n_x))
    if not records:
        warnings.warn("no trajectory records; binned density is zero")
        return counts
    instants = t0 + RAW_DT_S * np.arange(n_t)
    for rec in records:
        lo = np.searchsorted(instants, rec.timestamps[0], side="left")
        hi = np.searchsorted(instants, rec.timestamps[-1], side="right")
        if lo >= hi:
            continue
        ks = np.arange(lo, hi)
        xs = np.interp(instants[ks], rec.timestamps, rec.positions)
        cells = np.floor((xs - x0) / RAW_DX_MI).astype(int)
        inside = (cells >= 0) & (cells < n_x)
        np.add.at(counts, (ks[inside], cells[inside]), 1.0)
    return counts / (RAW_DX_MI * MI_TO_KM * lanes)


@dataclass(frozen=True)
class DensityField:
    """Normalized densities in [0, 1] on a dimensionless grid (dx = dt = 1).

    values[k, i] is the pooled cell (10 s x 0.04 mi at the default raw
    resolution); cap_raw records the veh/km/lane value mapped to 1.0.
    """

    grid: Grid1D
    values: np.ndarray
    cap_raw: float = DENSITY_CAP
    lanes: int = LANES

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        expected = (self.grid.n_steps + 1, self.grid.n_cells)
        if vals.shape != expected:
            raise ConfigError(
                f"density shape {vals.shape} does not match grid {expected}"
            )
        if not np.all(np.isfinite(vals)):
            raise ConfigError("density field contains non-finite entries")
        if vals.min() < 0.0 or vals.max() > 1.0 + 1e-12:
            raise ConfigError("normalized densities must lie in [0, 1]")
        object.__setattr__(self, "values", vals)

    def as_field(self) -> Field:
        return Field(self.grid, self.values)


def smooth_and_normalize(raw: np.ndarray, cap: float = DENSITY_CAP) -> DensityField:
    """Block-mean pooling (POOL_TIME x POOL_SPACE), cap, divide by cap.

    Trailing rows/columns that do not fill a whole block are clipped.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2:
        raise ConfigError("raw density must be a 2-D matrix")
    n_t = (raw.shape[0] // POOL_TIME) * POOL_TIME
    n_x = (raw.shape[1] // POOL_SPACE) * POOL_SPACE
    if n_t == 0 or n_x == 0:
        raise ConfigError(
            f"raw matrix {raw.shape} smaller than one {POOL_TIME}x{POOL_SPACE} block"
        )
    blocks = raw[:n_t, :n_x].reshape(
        n_t // POOL_TIME, POOL_TIME, n_x // POOL_SPACE, POOL_SPACE
    )
    pooled = blocks.mean(axis=(1, 3))
    pooled = np.minimum(pooled, cap) / cap
    grid = Grid1D(dx=1.0, dt=1.0, n_cells=pooled.shape[1],
                  n_steps=pooled.shape[0] - 1)
    return DensityField(grid, pooled, cap_raw=cap)


def repair_gaps(fld: DensityField, missing_columns: Sequence[int]) -> DensityField:
    """Fill missing spatial columns by per-step linear interpolation.

    Gap runs touching the domain edge copy their single valid neighbor.
    Non-missing entries are returned unchanged.
    """
    missing = sorted(set(int(c) for c in missing_columns))
    if not missing:
        return fld
    n_cols = fld.grid.n_cells
    if any(c < 0 or c >= n_cols for c in missing):
        raise ConfigError("missing column index out of range")
    valid = np.setdiff1d(np.arange(n_cols), missing)
    if valid.size == 0:
        raise ConfigError("cannot repair a field with every column missing")
    out = fld.values.copy()
    miss = np.asarray(missing)
    for row in out:
        row[miss] = np.interp(miss, valid, row[valid])
    return DensityField(fld.grid, out, cap_raw=fld.cap_raw, lanes=fld.lanes)


def read_density_csv(path) -> DensityField:
    """Read a normalized density from the Field CSV layout (one row per step)."""
    values = np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=float))
    grid = Grid1D(dx=1.0, dt=1.0, n_cells=values.shape[1],
                  n_steps=values.shape[0] - 1)
    return DensityField(grid, values)


# ---------------------------------------------------------------------------
# Flux calibration against rollout error


def boundary_traces(fld: DensityField) -> BoundarySpec:
    """Prescribed-trace boundary from the field's first and last columns."""
    return BoundarySpec(
        kind=PRESCRIBED_TRACES,
        left_trace=fld.values[:, 0].copy(),
        right_trace=fld.values[:, -1].copy(),
    )


# Search boxes, intentionally broad; rho_max stays pinned at 1 because the
# fields are normalized. Replay penalties keep Nelder-Mead inside.
_CALIBRATION_BOXES = {
    "greenshields": {"v_max": (0.05, 3.0)},
    "triangular1": {"v_max": (0.05, 3.0), "rho_c": (0.05, 0.95),
                    "w": (-3.0, -0.05)},
    "triangular2": {"v_max": (0.05, 3.0), "rho_c": (0.05, 0.95),
                    "w": (-3.0, -0.05)},
    "trapezoidal": {"v_max": (0.05, 3.0), "rho_1": (0.05, 0.9),
                    "rho_2": (0.1, 0.95), "w": (-3.0, -0.05)},
    "greenberg": {"c_0": (0.05, 3.0)},
    "underwood": {"c_1": (0.05, 3.0), "c_2": (0.1, 5.0)},
}

_PENALTY_BOX = 1e3
_PENALTY_UNSTABLE = 1e6


@dataclass(frozen=True)
class CalibrationReport:
    family: str
    params: dict
    error: float
    degenerate: bool
    start_errors: tuple
    n_evals: int

    def to_text(self) -> str:
        lines = [f"family: {self.family}"]
        for key in sorted(self.params):
            lines.append(f"{key}: {self.params[key]:.10g}")
        lines.append(f"rollout_mse: {self.error:.10g}")
        lines.append(f"degenerate: {self.degenerate}")
        lines.append(f"starts: {len(self.start_errors)}")
        lines.append(f"evaluations: {self.n_evals}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        keys = sorted(self.params)
        head = ",".join(["family"] + keys + ["rollout_mse", "degenerate"])
        row = ",".join(
            [self.family]
            + [format(self.params[k], ".17g") for k in keys]
            + [format(self.error, ".17g"), str(int(self.degenerate))]
        )
        return head + "\n" + row + "\n"


def _rollout_mse(model: FluxModel, fld: DensityField, horizon: int,
                 boundary: BoundarySpec) -> float:
    scheme = Scheme(kind=GODUNOV)
    grid = fld.grid
    sub = Grid1D(dx=grid.dx, dt=grid.dt, n_cells=grid.n_cells,
                 n_steps=horizon, x0=grid.x0)
    try:
        pred = rollout(scheme, model, fld.values[0], boundary, sub,
                       warn_cfl=False)
    except (InstabilityError, ConfigError, FloatingPointError):
        return _PENALTY_UNSTABLE
    diff = pred.values[1:, 1:-1] - fld.values[1 : horizon + 1, 1:-1]
    return float(np.mean(diff * diff))


def calibrate_flux(
    family,
    train_field: DensityField,
    horizon: Optional[int] = None,
    n_starts: int = 16,
    max_evals: int = 500,
    seed: int = 0,
) -> tuple[FluxModel, CalibrationReport]:
    """Fit a flux family to a density field by rollout error.

    Minimizes the mean squared error of the conservative rollout (exact
    interface fluxes, prescribed boundary traces, row 0 as the initial
    condition) over the family's parameter box, with n_starts seeded
    Nelder-Mead runs of at most max_evals objective evaluations each.
    Unstable candidates score a large penalty instead of aborting.
    """
    name = family.name if isinstance(family, FluxModel) else str(family).lower()
    if name not in _CALIBRATION_BOXES:
        raise ConfigError(f"no calibration box for flux family {name!r}")
    box = _CALIBRATION_BOXES[name]
    keys = sorted(box)
    lo = np.array([box[k][0] for k in keys])
    hi = np.array([box[k][1] for k in keys])
    if horizon is None:
        horizon = train_field.grid.n_steps
    if not 1 <= horizon <= train_field.grid.n_steps:
        raise ConfigError("calibration horizon outside the field")
    boundary = boundary_traces(train_field)
    degenerate = float(np.ptp(train_field.values)) < 1e-12

    def objective(theta: np.ndarray) -> float:
        excess = np.maximum(lo - theta, 0.0) + np.maximum(theta - hi, 0.0)
        if excess.any():
            return _PENALTY_BOX * (1.0 + float(excess.sum()))
        params = dict(zip(keys, theta))
        if name == "trapezoidal" and params["rho_2"] <= params["rho_1"] + 0.05:
            return _PENALTY_BOX * (
                1.0 + params["rho_1"] + 0.05 - params["rho_2"]
            )
        return _rollout_mse(make_flux(name, **params), train_field,
                            horizon, boundary)

    rng = np.random.default_rng(seed)
    starts = rng.uniform(lo, hi, size=(n_starts, len(keys)))
    best_theta, best_err = None, np.inf
    start_errors = []
    n_evals = 0
    for theta0 in starts:
        res = minimize(objective, theta0, method="Nelder-Mead",
                       options={"maxfev": max_evals, "xatol": 1e-6,
                                "fatol": 1e-12})
        n_evals += res.nfev
        start_errors.append(float(res.fun))
        if res.fun < best_err:
            best_err, best_theta = float(res.fun), res.x.copy()
    fitted = make_flux(name, **dict(zip(keys, best_theta)))
    report = CalibrationReport(
        family=name,
        params={k: float(v) for k, v in zip(keys, best_theta)},
        error=best_err,
        degenerate=degenerate,
        start_errors=tuple(start_errors),
        n_evals=n_evals,
    )
    return fitted, report


# ---------------------------------------------------------------------------
# Synthetic trajectories


_SCENARIO_ICS = {
    # Normalized density; breakpoints in window fractions. stationary_jam is
    # a standing shock (0.2 and 0.8 carry equal Greenshields flux);
    # stop_and_go alternates light and congested blocks whose shock and
    # rarefaction waves traverse the window.
    "free_flow": ((), (0.15,)),
    "stationary_jam": ((0.5,), (0.2, 0.8)),
    "stop_and_go": ((0.2, 0.4, 0.6, 0.8), (0.15, 0.75, 0.15, 0.75, 0.15)),
}


def _scenario_ic(scenario: str) -> PiecewiseConstantIC:
    # Breakpoints in computational units (window fractions).
    if scenario not in _SCENARIO_ICS:
        raise ConfigError(f"unknown scenario {scenario!r}; pick from {SCENARIOS}")
    breaks, vals = _SCENARIO_ICS[scenario]
    return PiecewiseConstantIC(np.asarray(breaks, dtype=float), np.asarray(vals))


def _scenario_model() -> FluxModel:
    return make_flux("greenshields", v_max=SCENARIO_V_MAX)


def scenario_field(scenario: str, model: Optional[FluxModel] = None) -> DensityField:
    """The generating density on the pooled grid (round-trip reference).

    Cell averages of the exact entropy solution, sampled at the pooled step
    instants; the half-bin offset against time-averaged pooling is well
    inside the round-trip tolerance.
    """
    if model is None:
        model = _scenario_model()
    n_cells = int(round(WINDOW_MI / (RAW_DX_MI * POOL_SPACE)))
    n_rows = int(round(WINDOW_S / (RAW_DT_S * POOL_TIME)))
    # Computational units: the window is one space unit, TIME_UNIT_S is one
    # time unit, matching the scenario flux's v_max.
    grid = Grid1D(
        dx=RAW_DX_MI * POOL_SPACE / WINDOW_MI,
        dt=RAW_DT_S * POOL_TIME / TIME_UNIT_S,
        n_cells=n_cells,
        n_steps=n_rows - 1,
    )
    fld = exact_reference(model, _scenario_ic(scenario), grid)
    out = Grid1D(dx=1.0, dt=1.0, n_cells=n_cells, n_steps=n_rows - 1)
    return DensityField(out, np.clip(fld.values, 0.0, 1.0))


def synth_trajectories(
    scenario: str,
    seed: int = 0,
    model: Optional[FluxModel] = None,
    veh_per_unit: float = DENSITY_CAP * MI_TO_KM * LANES,
) -> list[TrajectoryRecord]:
    """Vehicles integrated through the exact scenario solution.

    Initial vehicles are placed by inverting the cumulative count of the
    initial density; inflow at the left edge releases a vehicle whenever
    the accumulated boundary flux reaches one. Each vehicle moves at the
    local flow speed f(rho)/rho with rho bilinearly interpolated from the
    exact solution, stepped at the raw time resolution, so vehicle counts
    track the density field by conservation. The seed only assigns lanes;
    the kinematics are deterministic. The generating flux defaults to
    Greenshields with v_max = SCENARIO_V_MAX but any concave density flux
    works (its v_max sets the computational wave speeds).
    """
    ic = _scenario_ic(scenario)
    if model is None:
        model = _scenario_model()
    unit_speed = WINDOW_MI / TIME_UNIT_S  # mi/s per computational speed

    # Exact solution on a lookup grid: 200 cells, 2 s rows, one extra row so
    # the last raw instant interpolates inside the table.
    n_look_x, look_dt_s = 200, 2.0
    n_look_t = int(round(WINDOW_S / look_dt_s)) + 1
    look = exact_reference(model, ic, Grid1D(
        dx=1.0 / n_look_x,
        dt=look_dt_s / TIME_UNIT_S,
        n_cells=n_look_x,
        n_steps=n_look_t,
    ))
    table = look.values  # normalized density, rows every look_dt_s seconds
    centers_mi = (np.arange(n_look_x) + 0.5) * (WINDOW_MI / n_look_x)

    def speeds(xs: np.ndarray, t_s: float) -> np.ndarray:
        r = t_s / look_dt_s
        r0 = min(int(r), table.shape[0] - 2)
        w = r - r0
        row = (1.0 - w) * table[r0] + w * table[r0 + 1]
        rho = np.maximum(np.interp(xs, centers_mi, row), 1e-9)
        return unit_speed * evaluate(model, rho) / rho

    # Initial placement: cumulative count N(x) is piecewise linear in the
    # piecewise-constant density; vehicle j sits at N^{-1}(j + 1/2).
    edges_mi = np.concatenate(([0.0], ic.breakpoints, [1.0])) * WINDOW_MI
    dens = np.asarray(ic.values) * veh_per_unit  # veh/mi
    cum = np.concatenate(([0.0], np.cumsum(dens * np.diff(edges_mi))))
    n_init = int(np.floor(cum[-1]))
    x_init = np.interp(np.arange(n_init) + 0.5, cum, edges_mi)

    n_steps = int(round(WINDOW_S / RAW_DT_S))
    left_rho = table[:, 0]

    # Upper bound on spawned vehicles for preallocation; flux in veh/s is
    # (veh/mi density unit) x (computational flux) x (mi/s per unit speed).
    max_flux = veh_per_unit * evaluate(model, 0.5) * WINDOW_MI / TIME_UNIT_S
    capacity = n_init + int(np.ceil(max_flux * WINDOW_S)) + 4
    paths = np.full((capacity, n_steps), np.nan)
    paths[:n_init, 0] = x_init
    active = list(range(n_init))
    n_total = n_init

    acc = 0.0
    for k in range(1, n_steps):
        t_prev = (k - 1) * RAW_DT_S
        if active:
            cur = paths[active, k - 1]
            stepped = cur + RAW_DT_S * speeds(cur, t_prev)
            paths[active, k] = stepped
            still = stepped <= WINDOW_MI + 2 * RAW_DX_MI
            active = [i for i, keep in zip(active, still) if keep]
        # Boundary inflow from the exact left-edge flux.
        r = t_prev / look_dt_s
        r0 = min(int(r), left_rho.size - 2)
        w = r - r0
        rho_in = (1.0 - w) * left_rho[r0] + w * left_rho[r0 + 1]
        acc += veh_per_unit * float(evaluate(model, rho_in)) \
            * WINDOW_MI / TIME_UNIT_S * RAW_DT_S
        while acc >= 1.0:
            acc -= 1.0
            if n_total < capacity:
                paths[n_total, k] = 0.0
                active.append(n_total)
                n_total += 1

    rng = np.random.default_rng(seed)
    lanes = rng.integers(1, LANES + 1, size=n_total)
    records = []
    for vid in range(n_total):
        row = paths[vid]
        alive = np.where(np.isfinite(row))[0]
        if alive.size < 2:
            continue
        records.append(TrajectoryRecord(
            vehicle_id=vid,
            timestamps=alive * RAW_DT_S,
            positions=row[alive],
            lane=int(lanes[vid]),
        ))
    return records
