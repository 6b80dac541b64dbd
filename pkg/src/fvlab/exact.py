"""Exact entropy solutions for piecewise-constant initial data.

Two independent routes are provided and cross-checked in the test suite:

* closed-form self-similar Riemann solutions (solve_riemann/eval_riemann),
  plus quadrature-based cell averages of those profiles;
* a variational reference solver: the solution potential is minimized over
  a finite, provably sufficient candidate set, and cell averages fall out
  of potential differences exactly (no sub-cell differencing error).

For a concave flux the potential is N(t,x) = min_y [N0(y) + t*G((x-y)/t)]
with N0 the negated cumulative of the initial data and G the concave
conjugate G(q) = sup_u (f(u) - q*u); the density of cell i is
-(N(t, x_{i+1/2}) - N(t, x_{i-1/2})) / dx. The convex Burgers flux uses the
mirrored orientation (positive cumulative, L(q) = sup_u (q*u - f(u)),
positive potential difference). Both conjugates evaluate exactly through
the generalized inverse of f': K(q) = f(v) -+ q*v at v = dinv(q).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fluxes import (
    FluxModel,
    derivative,
    derivative_onesided,
    evaluate,
    kinks,
    make_flux,
)
from .grid import ConfigError, Field, Grid1D


@dataclass(frozen=True)
class PiecewiseConstantIC:
    """u0(x) = values[k] on the k-th piece delimited by the breakpoints.

    values[0] extends to -inf and values[-1] to +inf; a grid restricts the
    window actually solved on.
    """

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = np.atleast_1d(np.asarray(self.breakpoints, dtype=float))
        vals = np.atleast_1d(np.asarray(self.values, dtype=float))
        if bp.size == 0:
            bp = np.empty(0, dtype=float)
        if vals.size != bp.size + 1:
            raise ConfigError("need exactly one more value than breakpoints")
        if bp.size and not np.all(np.diff(bp) > 0):
            raise ConfigError("breakpoints must be strictly increasing")
        if not (np.all(np.isfinite(bp)) and np.all(np.isfinite(vals))):
            raise ConfigError("non-finite initial condition")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)

    def eval(self, x):
        idx = np.searchsorted(self.breakpoints, np.asarray(x, dtype=float), side="right")
        return self.values[idx]

    def cumulative(self, y):
        """Integral of u0 from the first breakpoint (or 0) to y, vectorized."""
        y = np.asarray(y, dtype=float)
        bp, vals = self.breakpoints, self.values
        if bp.size == 0:
            return vals[0] * y
        # knot_cum[j] = integral from bp[0] to bp[j]
        if bp.size > 1:
            knot_cum = np.concatenate(([0.0], np.cumsum(vals[1:-1] * np.diff(bp))))
        else:
            knot_cum = np.zeros(1)
        k = np.searchsorted(bp, y, side="right")
        below = vals[0] * (y - bp[0])
        inside = knot_cum[np.maximum(k - 1, 0)] + vals[np.minimum(k, vals.size - 1)] * (
            y - bp[np.maximum(k - 1, 0)]
        )
        return np.where(k == 0, below, inside)

    def cell_averages(self, grid: Grid1D) -> np.ndarray:
        edges = self.cumulative(grid.interfaces())
        return np.diff(edges) / grid.dx


def riemann_ic(jump_x: float, u_left: float, u_right: float) -> PiecewiseConstantIC:
    return PiecewiseConstantIC(np.array([jump_x]), np.array([u_left, u_right]))


CONSTANT = "constant"
SHOCK = "shock"
RAREFACTION = "rarefaction"


@dataclass(frozen=True)
class RiemannSolution:
    model: FluxModel
    u_left: float
    u_right: float
    kind: str
    speed: float = 0.0  # shock speed (Rankine-Hugoniot)
    span: tuple[float, float] = (0.0, 0.0)  # rarefaction wave-speed range


def solve_riemann(model: FluxModel, u_left: float, u_right: float) -> RiemannSolution:
    """Entropy-admissible solution structure of a single-jump problem."""
    lo, hi = model.domain
    for u in (u_left, u_right):
        if not (lo <= u <= hi):
            raise ConfigError(f"state {u} outside domain of {model.name}")
    if u_left == u_right:
        return RiemannSolution(model, u_left, u_right, CONSTANT)
    shock_up = u_left < u_right if model.convexity == "concave" else u_left > u_right
    if shock_up:
        speed = (evaluate(model, u_right) - evaluate(model, u_left)) / (u_right - u_left)
        return RiemannSolution(model, u_left, u_right, SHOCK, speed=float(speed))
    if model.convexity == "concave":
        edges = (derivative_onesided(model, u_left)[0], derivative_onesided(model, u_right)[1])
    else:
        edges = (derivative_onesided(model, u_left)[1], derivative_onesided(model, u_right)[0])
    span = (min(edges), max(edges))
    return RiemannSolution(model, u_left, u_right, RAREFACTION, span=span)


def dinv(model: FluxModel, q):
    """Generalized inverse of f', clipped into the domain.

    Returns the maximizer of f(u) - q*u (concave models) or of q*u - f(u)
    (convex models); on the flat stretches of piecewise-linear models a
    deterministic representative of the maximizing set is returned.
    """
    q = np.asarray(q, dtype=float)
    p = model.params
    lo, hi = model.domain
    name = model.name
    if name == "greenshields":
        out = 0.5 * p["rho_max"] * (1.0 - q / p["v_max"])
    elif name in ("triangular1", "triangular2"):
        out = np.where(q >= p["v_max"], lo, np.where(q > p["w"], p["rho_c"], hi))
    elif name == "trapezoidal":
        m2 = (p["w"] * (p["rho_2"] - p["rho_max"]) - p["v_max"] * p["rho_1"]) / (
            p["rho_2"] - p["rho_1"]
        )
        out = np.where(
            q >= p["v_max"],
            lo,
            np.where(q >= m2, p["rho_1"], np.where(q > p["w"], p["rho_2"], hi)),
        )
    elif name == "greenberg":
        # Cap the exponent; the clip below lands capped values on rho_max.
        expo = np.minimum(-(1.0 + q / p["c_0"]), 700.0)
        out = p["rho_max"] * np.exp(expo)
    elif name == "underwood":
        out = _bisect_decreasing(
            lambda u: derivative(model, u), q, lo, hi, iterations=60
        )
    else:  # burgers, f'(u) = u
        out = q
    return np.clip(out, lo, hi)


def _bisect_decreasing(fprime, target, lo, hi, iterations=60):
    target = np.asarray(target, dtype=float)
    a = np.full(target.shape, float(lo))
    b = np.full(target.shape, float(hi))
    for _ in range(iterations):
        mid = 0.5 * (a + b)
        take_right = fprime(mid) > target
        a = np.where(take_right, mid, a)
        b = np.where(take_right, b, mid)
    return 0.5 * (a + b)


def conjugate_kernel(model: FluxModel, q):
    """G(q) = sup_u (f(u) - q u) for concave f; L(q) = sup_u (q u - f(u)) for convex."""
    v = dinv(model, q)
    if model.convexity == "concave":
        return evaluate(model, v) - q * v
    return q * v - evaluate(model, v)


def eval_riemann(sol: RiemannSolution, t: float, x):
    """Self-similar solution value(s) at time t > 0 and position(s) x.

    The jump is at x = 0; shift x for other jump locations.
    """
    if t <= 0:
        raise ConfigError("eval_riemann needs t > 0")
    xi = np.asarray(x, dtype=float) / t
    if sol.kind == CONSTANT:
        out = np.full(xi.shape, sol.u_left)
    elif sol.kind == SHOCK:
        out = np.where(xi < sol.speed, sol.u_left, sol.u_right)
    else:
        lo = min(sol.u_left, sol.u_right)
        hi = max(sol.u_left, sol.u_right)
        out = np.clip(dinv(sol.model, xi), lo, hi)
    return out if np.ndim(x) else float(out)


def riemann_field(
    model: FluxModel,
    u_left: float,
    u_right: float,
    jump_x: float,
    grid: Grid1D,
    gl_nodes: int = 16,
) -> Field:
    """Cell averages of the Riemann solution via piecewise Gauss-Legendre.

    Independent of the variational solver: integrates the self-similar
    profile directly, splitting cells at the wave rays so every quadrature
    panel sees an analytic integrand.
    """
    sol = solve_riemann(model, u_left, u_right)
    nodes, weights = np.polynomial.legendre.leggauss(gl_nodes)
    rays = _wave_rays(sol)
    ifaces = grid.interfaces()
    ic = riemann_ic(jump_x, u_left, u_right)
    values = np.empty((grid.n_steps + 1, grid.n_cells))
    values[0] = ic.cell_averages(grid)
    for n in range(1, grid.n_steps + 1):
        t = n * grid.dt
        pts = np.unique(np.concatenate((ifaces, jump_x + rays * t)))
        pts = pts[(pts >= ifaces[0]) & (pts <= ifaces[-1])]
        seg_l, seg_r = pts[:-1], pts[1:]
        mid = 0.5 * (seg_l + seg_r)
        half = 0.5 * (seg_r - seg_l)
        xq = mid[:, None] + half[:, None] * nodes[None, :]
        uq = eval_riemann(sol, t, xq - jump_x)
        seg_int = (uq * weights[None, :]).sum(axis=1) * half
        owner = np.clip(np.searchsorted(ifaces, mid, side="right") - 1, 0, grid.n_cells - 1)
        row = np.zeros(grid.n_cells)
        np.add.at(row, owner, seg_int)
        values[n] = row / grid.dx
    return Field(grid, values)


def _wave_rays(sol: RiemannSolution) -> np.ndarray:
    if sol.kind == CONSTANT:
        return np.empty(0)
    if sol.kind == SHOCK:
        return np.array([sol.speed])
    rays = [sol.span[0], sol.span[1]]
    lo = min(sol.u_left, sol.u_right)
    hi = max(sol.u_left, sol.u_right)
    for k in kinks(sol.model):
        if lo < k < hi:
            rays.extend(derivative_onesided(sol.model, k))
    return np.unique(np.asarray(rays, dtype=float))


def _candidate_slopes(model: FluxModel, value: float) -> tuple[float, ...]:
    left, right = derivative_onesided(model, value)
    return (left,) if left == right else (left, right)


def _variational_potential(model, ic, sign, t, x):
    """min_y [P0(y) + t*K((x-y)/t)] over the exact finite candidate set."""
    bp, vals = ic.breakpoints, ic.values
    cols = []
    for k, u_k in enumerate(vals):
        for slope in _candidate_slopes(model, float(u_k)):
            y = x - t * slope
            if k > 0:
                y = np.maximum(y, bp[k - 1])
            if k < bp.size:
                y = np.minimum(y, bp[k])
            cols.append(y)
    if bp.size:
        cols.append(np.broadcast_to(bp, (x.size, bp.size)).T)
    y_cand = np.vstack(cols)  # (n_candidates, n_points)
    p0 = sign * ic.cumulative(y_cand)
    q = (x[None, :] - y_cand) / t
    return np.min(p0 + t * conjugate_kernel(model, q), axis=0)


def _variational_solve(model: FluxModel, ic: PiecewiseConstantIC, grid: Grid1D) -> Field:
    lo, hi = model.domain
    if np.any(ic.values < lo) or np.any(ic.values > hi):
        raise ConfigError("initial condition outside flux domain")
    sign = -1.0 if model.convexity == "concave" else 1.0
    x = grid.interfaces()
    values = np.empty((grid.n_steps + 1, grid.n_cells))
    values[0] = ic.cell_averages(grid)
    for n in range(1, grid.n_steps + 1):
        pot = _variational_potential(model, ic, sign, n * grid.dt, x)
        values[n] = sign * np.diff(pot) / grid.dx
    return Field(grid, values)


def lax_hopf_solve(model: FluxModel, ic: PiecewiseConstantIC, grid: Grid1D) -> Field:
    if model.convexity != "concave":
        raise ConfigError("lax_hopf_solve supports concave fluxes; see burgers_reference")
    return _variational_solve(model, ic, grid)


def burgers_reference(ic: PiecewiseConstantIC, grid: Grid1D) -> Field:
    return _variational_solve(make_flux("burgers"), ic, grid)


def exact_reference(model: FluxModel, ic: PiecewiseConstantIC, grid: Grid1D) -> Field:
    """Entropy-solution cell averages for any shipped model."""
    return _variational_solve(model, ic, grid)


# Default fine reference grid: dt=1e-4, dx=1e-3; sized per target window.
FINE_DX = 1e-3
FINE_DT = 1e-4


def fine_reference_grid(coarse: Grid1D) -> Grid1D:
    """Fine-in-space replica of a coarse grid sampled at the coarse instants.

    Spatial resolution is refined to FINE_DX (integer ratio enforced);
    time keeps the coarse instants since comparisons sample time pointwise.
    """
    r_x = coarse.dx / FINE_DX
    r = int(round(r_x))
    if r < 1 or abs(r_x - r) > 1e-9:
        raise ConfigError("coarse dx is not an integer multiple of the fine dx")
    return Grid1D(
        dx=FINE_DX,
        dt=coarse.dt,
        n_cells=coarse.n_cells * r,
        n_steps=coarse.n_steps,
        x0=coarse.x0,
    )
