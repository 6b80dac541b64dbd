"""Uniform space-time mesh, solution fields, projection, and error metrics.

A Field stores cell averages u[n][i] for time steps n = 0..n_steps and
cells i = 0..n_cells-1. Error metrics exclude the initial row and the two
edge columns whenever the field is large enough for that to make sense
(degenerate single-row or <=2-column fields are compared in full).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

FIELD_MAGIC = b"NFV1"


class ConfigError(ValueError):
    """Invalid configuration or incompatible grids (CLI exit code 2)."""


@dataclass(frozen=True)
class Grid1D:
    """Uniform mesh: cells I_i = [x_{i-1/2}, x_{i+1/2}] and steps of dt."""

    dx: float
    dt: float
    n_cells: int
    n_steps: int
    x0: float = 0.0

    def __post_init__(self):
        if self.dx <= 0 or self.dt <= 0:
            raise ConfigError("grid spacings must be positive")
        if self.n_cells < 1 or self.n_steps < 0:
            raise ConfigError("grid extents must be positive")

    @property
    def length(self) -> float:
        return self.n_cells * self.dx

    @property
    def x_end(self) -> float:
        return self.x0 + self.length

    def interfaces(self) -> np.ndarray:
        return self.x0 + self.dx * np.arange(self.n_cells + 1)

    def centers(self) -> np.ndarray:
        return self.x0 + self.dx * (np.arange(self.n_cells) + 0.5)

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)


@dataclass
class Field:
    """Cell averages on a grid; values has shape (n_steps+1, n_cells)."""

    grid: Grid1D
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = (self.grid.n_steps + 1, self.grid.n_cells)
        if self.values.shape != expected:
            raise ConfigError(
                f"field shape {self.values.shape} does not match grid {expected}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("field contains non-finite entries")

    def mass(self, n: int) -> float:
        return float(np.sum(self.values[n]) * self.grid.dx)


GHOST_EXTRAPOLATE = "ghost_extrapolate"
PRESCRIBED_TRACES = "prescribed_traces"


@dataclass(frozen=True)
class BoundarySpec:
    """Boundary handling for rollouts.

    GhostExtrapolate fills ghost cells by zero-gradient edge replication.
    PrescribedTraces pins the first and last cell of every computed row to
    given data (left_trace[k] / right_trace[k] are the values for row k+1)
    and duplicates them outward for wider stencils.
    """

    kind: str = GHOST_EXTRAPOLATE
    left_trace: Optional[np.ndarray] = None
    right_trace: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in (GHOST_EXTRAPOLATE, PRESCRIBED_TRACES):
            raise ConfigError(f"unknown boundary kind {self.kind!r}")
        if self.kind == PRESCRIBED_TRACES:
            if self.left_trace is None or self.right_trace is None:
                raise ConfigError("prescribed boundaries need both traces")
            object.__setattr__(
                self, "left_trace", np.asarray(self.left_trace, dtype=float)
            )
            object.__setattr__(
                self, "right_trace", np.asarray(self.right_trace, dtype=float)
            )

    def check_length(self, n_steps: int) -> None:
        if self.kind == PRESCRIBED_TRACES:
            if len(self.left_trace) < n_steps or len(self.right_trace) < n_steps:
                raise ConfigError("boundary traces shorter than the rollout")


def project_fine_to_coarse(fine: Field, coarse_grid: Grid1D) -> Field:
    """Block-average a fine field onto a coarse grid.

    Spatial coarse averages are means of the r_x fine cells they cover;
    time is sampled pointwise at the shared coarse instants (r_t stride).
    """
    fg = fine.grid
    r_x = _integer_ratio(coarse_grid.dx, fg.dx, "spatial")
    r_t = _integer_ratio(coarse_grid.dt, fg.dt, "temporal")
    if abs(fg.x0 - coarse_grid.x0) > 1e-12 * max(1.0, abs(coarse_grid.x0)):
        raise ConfigError("grids have different origins")
    if fg.n_cells != coarse_grid.n_cells * r_x:
        raise ConfigError("fine grid does not tile the coarse cells")
    if fg.n_steps < coarse_grid.n_steps * r_t:
        raise ConfigError("fine field too short in time")
    rows = fine.values[:: r_t][: coarse_grid.n_steps + 1]
    blocks = rows.reshape(coarse_grid.n_steps + 1, coarse_grid.n_cells, r_x)
    return Field(coarse_grid, blocks.mean(axis=2))


def _integer_ratio(coarse: float, fine: float, label: str) -> int:
    ratio = coarse / fine
    r = int(round(ratio))
    if r < 1 or abs(ratio - r) > 1e-9 * max(1.0, ratio):
        raise ConfigError(f"{label} resolutions are not integer multiples (ratio {ratio})")
    return r


def _included(a: Field, b: Field) -> tuple[np.ndarray, np.ndarray]:
    if a.values.shape != b.values.shape:
        raise ConfigError("fields have different shapes")
    av, bv = a.values, b.values
    if av.shape[0] > 1:
        av, bv = av[1:], bv[1:]
    if av.shape[1] > 2:
        av, bv = av[:, 1:-1], bv[:, 1:-1]
    return av, bv


def l1_error(a: Field, b: Field) -> float:
    """mean |u - u_hat| over included cells (reference first)."""
    av, bv = _included(a, b)
    return float(np.mean(np.abs(av - bv)))


def l2_error(a: Field, b: Field) -> float:
    """mean (u - u_hat)^2 over included cells; the mean square, not its root."""
    av, bv = _included(a, b)
    return float(np.mean((av - bv) ** 2))


def rel_error(a: Field, b: Field, eps: float = 0.1) -> float:
    """mean |u - u_hat| / |max(eps, u)| with u the reference field a."""
    av, bv = _included(a, b)
    return float(np.mean(np.abs(av - bv) / np.abs(np.maximum(eps, av))))


def write_field_csv(fld: Field, path) -> None:
    # One row per time step; 17 significant digits round-trip f64 exactly.
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for row in fld.values:
            fh.write(",".join(format(v, ".17g") for v in row))
            fh.write("\n")


def read_field_csv(path, grid: Grid1D) -> Field:
    values = [
        [float(tok) for tok in line.split(",")]
        for line in open(path, encoding="ascii").read().splitlines()
        if line
    ]
    return Field(grid, np.array(values))


def write_field(fld: Field, path) -> None:
    """Binary format: magic NFV1, u64 n_rows/n_cells, f64 dx/dt/x0, f64 data."""
    g = fld.grid
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<QQ", fld.values.shape[0], fld.values.shape[1]))
        fh.write(struct.pack("<ddd", g.dx, g.dt, g.x0))
        fh.write(fld.values.astype("<f8").tobytes())


def read_field(path) -> Field:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FIELD_MAGIC:
            raise ConfigError(f"bad field file magic {magic!r}")
        n_rows, n_cells = struct.unpack("<QQ", fh.read(16))
        dx, dt, x0 = struct.unpack("<ddd", fh.read(24))
        payload = fh.read(8 * n_rows * n_cells)
    values = np.frombuffer(payload, dtype="<f8").reshape(n_rows, n_cells)
    grid = Grid1D(dx=dx, dt=dt, n_cells=int(n_cells), n_steps=int(n_rows) - 1, x0=x0)
    return Field(grid, values.copy())


def write_field_meta(path, meta: dict) -> None:
    """Sidecar metadata: sorted key=value lines (deterministic byte output)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(meta):
            fh.write(f"{key}={meta[key]}\n")
