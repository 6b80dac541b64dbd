"""Classical numerical fluxes and the conservative finite-volume stepper.

Interface fluxes map an (a-1)-cell-by-b-step stencil to one flux value;
the update rule is u_i^{n+1} = u_i^n - (dt/dx) (F_{i+1/2} - F_{i-1/2}),
so interior mass change telescopes to the boundary flux difference no
matter what the flux rule computes. ENO3/WENO5 reconstruct the split
fluxes f_pm(u) = (f(u) +- alpha u) / 2 with alpha = max |f'| over the
current row's value range.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dataclass_field
from typing import Optional

import numpy as np
from scipy.integrate import quad

from .fluxes import FluxModel, alpha_max, evaluate, kinks, sonic_point
from .grid import (
    GHOST_EXTRAPOLATE,
    PRESCRIBED_TRACES,
    BoundarySpec,
    ConfigError,
    Field,
    Grid1D,
)

GODUNOV = "godunov"
LAX_FRIEDRICHS = "lax_friedrichs"
ENGQUIST_OSHER = "engquist_osher"
ENO3 = "eno3"
WENO5 = "weno5"
NEURAL = "neural"

CLASSICAL_KINDS = (GODUNOV, LAX_FRIEDRICHS, ENGQUIST_OSHER, ENO3, WENO5)

LF_STANDARD = "standard"
LF_PAPER_LITERAL = "paper_literal"


class InstabilityError(RuntimeError):
    """Rollout produced non-finite values (CLI exit code 3)."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class CFLWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Scheme:
    """A flux rule: one of the classical kinds or a learned interface flux.

    Neural schemes carry a duck-typed flux object exposing ``a``, ``b`` and
    ``flux_row(block) -> fluxes`` over an (n_interfaces, (a-1)*b) block.
    """

    kind: str
    lf_variant: str = LF_STANDARD
    neural: Optional[object] = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in CLASSICAL_KINDS + (NEURAL,):
            raise ConfigError(f"unknown scheme kind {self.kind!r}")
        if self.kind == NEURAL and self.neural is None:
            raise ConfigError("neural scheme without a flux object")
        if not self.name:
            label = self.kind
            if self.kind == LAX_FRIEDRICHS and self.lf_variant != LF_STANDARD:
                label += f"_{self.lf_variant}"
            if self.kind == NEURAL:
                label = getattr(self.neural, "label", "neural")
            object.__setattr__(self, "name", label)

    @property
    def ghost(self) -> int:
        if self.kind in (ENO3, WENO5):
            return 3
        if self.kind == NEURAL:
            return (self.neural.a - 1) // 2
        return 1

    @property
    def time_depth(self) -> int:
        return self.neural.b if self.kind == NEURAL else 1


def godunov_flux(model: FluxModel, u_left, u_right):
    """min of f over [u_left, u_right] if u_left <= u_right, else the max."""
    ul = np.asarray(u_left, dtype=float)
    ur = np.asarray(u_right, dtype=float)
    fl = evaluate(model, ul)
    fr = evaluate(model, ur)
    sonic = sonic_point(model)
    lo = np.minimum(ul, ur)
    hi = np.maximum(ul, ur)
    f_at_sonic = evaluate(model, np.clip(sonic, lo, hi))
    if model.convexity == "concave":
        out = np.where(ul <= ur, np.minimum(fl, fr), f_at_sonic)
    else:
        out = np.where(ul <= ur, f_at_sonic, np.maximum(fl, fr))
    return out if np.ndim(u_left) or np.ndim(u_right) else float(out)


def lax_friedrichs_flux(model, u_left, u_right, dx_over_dt, variant=LF_STANDARD):
    ul = np.asarray(u_left, dtype=float)
    ur = np.asarray(u_right, dtype=float)
    if dx_over_dt <= 0:
        raise ConfigError("dx/dt must be positive")
    mean = 0.5 * (evaluate(model, ul) + evaluate(model, ur))
    diff = ur - ul
    if variant == LF_PAPER_LITERAL:
        diff = np.abs(diff)
    elif variant != LF_STANDARD:
        raise ConfigError(f"unknown Lax-Friedrichs variant {variant!r}")
    out = mean - 0.5 * dx_over_dt * diff
    return out if np.ndim(u_left) or np.ndim(u_right) else float(out)


def _eo_primitive(model: FluxModel, u):
    # Psi(u) = oriented integral of |f'| from the sonic point to u; equals
    # sign(u - sonic) * |f(u) - f(sonic)| when |f'| switches sign only there.
    sonic = sonic_point(model)
    f_sonic = evaluate(model, sonic)
    return np.sign(u - sonic) * np.abs(evaluate(model, u) - f_sonic)


def engquist_osher_flux(model: FluxModel, u_left, u_right):
    ul = np.asarray(u_left, dtype=float)
    ur = np.asarray(u_right, dtype=float)
    mean = 0.5 * (evaluate(model, ul) + evaluate(model, ur))
    out = mean - 0.5 * (_eo_primitive(model, ur) - _eo_primitive(model, ul))
    return out if np.ndim(u_left) or np.ndim(u_right) else float(out)


def eo_integral_quad(model: FluxModel, u_left: float, u_right: float) -> float:
    """Adaptive-quadrature |f'| integral; slow fallback and test oracle."""
    from .fluxes import derivative

    special = [k for k in kinks(model) if min(u_left, u_right) < k < max(u_left, u_right)]
    s = sonic_point(model)
    if min(u_left, u_right) < s < max(u_left, u_right):
        special.append(s)
    val, _ = quad(
        lambda x: abs(derivative(model, x)),
        u_left,
        u_right,
        points=sorted(special) or None,
        epsabs=1e-10,
        limit=200,
    )
    return val


# Reconstruction coefficients c[r] for a 3-cell stencil starting r cells
# left of the owner, evaluated at the owner's right edge.
_ENO3_COEFFS = np.array(
    [
        [1.0 / 3.0, 5.0 / 6.0, -1.0 / 6.0],  # r=0: cells {i, i+1, i+2}
        [-1.0 / 6.0, 5.0 / 6.0, 1.0 / 3.0],  # r=1: cells {i-1, i, i+1}
        [1.0 / 3.0, -7.0 / 6.0, 11.0 / 6.0],  # r=2: cells {i-2, i-1, i}
    ]
)


def eno2_reconstruct(g_im1, g_i, g_ip1):
    """Two-cell ENO step: pick the smoother one-sided slope, extrapolate.

    Chooses the right stencil {g_i, g_ip1} only when |g_ip1 - g_i| is
    strictly smaller than |g_i - g_im1|, otherwise the left one.
    """
    delta_minus = abs(g_i - g_im1)
    delta_plus = abs(g_ip1 - g_i)
    if delta_plus < delta_minus:
        return g_i + 0.5 * (g_ip1 - g_i)
    return g_i + 0.5 * (g_i - g_im1)


def _eno3_plus(v):
    """Third-order ENO reconstruction at the owner's right edge.

    v has shape (..., 5) holding cells (i-2 .. i+2) of the owner i.
    """
    v = np.asarray(v, dtype=float)
    # Stencil start s in window coordinates; owner sits at index 2.
    s = np.full(v.shape[:-1], 2, dtype=int)
    left1 = np.abs(v[..., 3] - v[..., 2]) >= np.abs(v[..., 2] - v[..., 1])
    s = s - left1.astype(int)
    d2 = v[..., :-2] - 2.0 * v[..., 1:-1] + v[..., 2:]
    d2_left = np.take_along_axis(d2, (s - 1)[..., None], axis=-1)[..., 0]
    d2_right = np.take_along_axis(d2, s[..., None], axis=-1)[..., 0]
    s = s - (np.abs(d2_right) >= np.abs(d2_left)).astype(int)
    gathered = np.take_along_axis(v, s[..., None] + np.arange(3), axis=-1)
    coeffs = _ENO3_COEFFS[2 - s]
    return np.sum(coeffs * gathered, axis=-1)


def _weno5_plus(v, eps=1e-6):
    """Fifth-order WENO (Jiang-Shu) at the owner's right edge; v as above."""
    v1, v2, v3, v4, v5 = (v[..., k] for k in range(5))
    p0 = (2.0 * v1 - 7.0 * v2 + 11.0 * v3) / 6.0
    p1 = (-v2 + 5.0 * v3 + 2.0 * v4) / 6.0
    p2 = (2.0 * v3 + 5.0 * v4 - v5) / 6.0
    b0 = 13.0 / 12.0 * (v1 - 2 * v2 + v3) ** 2 + 0.25 * (v1 - 4 * v2 + 3 * v3) ** 2
    b1 = 13.0 / 12.0 * (v2 - 2 * v3 + v4) ** 2 + 0.25 * (v2 - v4) ** 2
    b2 = 13.0 / 12.0 * (v3 - 2 * v4 + v5) ** 2 + 0.25 * (3 * v3 - 4 * v4 + v5) ** 2
    a0 = 0.1 / (eps + b0) ** 2
    a1 = 0.6 / (eps + b1) ** 2
    a2 = 0.3 / (eps + b2) ** 2
    total = a0 + a1 + a2
    return (a0 * p0 + a1 * p1 + a2 * p2) / total


def _split_flux_reconstruct(model, stencil, alpha, reconstruct):
    st = np.asarray(stencil, dtype=float)
    if st.shape[-1] != 6:
        raise ConfigError("ENO3/WENO5 stencils carry 6 cell values")
    f = evaluate(model, st)
    g_plus = 0.5 * (f + alpha * np.clip(st, *model.domain))
    g_minus = 0.5 * (f - alpha * np.clip(st, *model.domain))
    plus = reconstruct(g_plus[..., :5])
    minus = reconstruct(g_minus[..., 5:0:-1])  # mirrored neighborhood of cell i+1
    return plus + minus


def eno3_flux(model: FluxModel, stencil, alpha: float):
    """ENO3 interface flux from 6 cells (i-2 .. i+3) around x_{i+1/2}."""
    out = _split_flux_reconstruct(model, stencil, alpha, _eno3_plus)
    return out if np.ndim(stencil) > 1 else float(out)


def weno5_flux(model: FluxModel, stencil, alpha: float):
    """WENO5 interface flux from 6 cells (i-2 .. i+3) around x_{i+1/2}."""
    out = _split_flux_reconstruct(model, stencil, alpha, _weno5_plus)
    return out if np.ndim(stencil) > 1 else float(out)


@dataclass
class RolloutDiagnostics:
    boundary_flux_left: np.ndarray = dataclass_field(default_factory=lambda: np.empty(0))
    boundary_flux_right: np.ndarray = dataclass_field(default_factory=lambda: np.empty(0))
    cfl_violations: int = 0
    max_wave_speed: float = 0.0


def _pad_history(history: np.ndarray, ghost: int):
    """Pad a (b, I) history block with ghost columns for this step's fluxes.

    Edge replication covers both boundary kinds: under prescribed traces the
    edge cells already hold the observed boundary data, which is duplicated
    outward to provide the stencil padding.
    """
    left = np.repeat(history[:, :1], ghost, axis=1)
    right = np.repeat(history[:, -1:], ghost, axis=1)
    return np.concatenate((left, history, right), axis=1)


def _interface_fluxes(scheme, model, history, grid):
    padded = _pad_history(history, scheme.ghost)
    n_ifaces = grid.n_cells + 1
    if scheme.kind == NEURAL:
        a, b = scheme.neural.a, scheme.neural.b
        win = np.lib.stride_tricks.sliding_window_view(padded, a - 1, axis=1)
        # (b, n_ifaces, a-1) -> (n_ifaces, b*(a-1)): rows oldest-to-newest.
        block = np.transpose(win, (1, 0, 2)).reshape(n_ifaces, b * (a - 1))
        return np.asarray(scheme.neural.flux_row(block), dtype=float)
    row = padded[-1]
    if scheme.kind in (ENO3, WENO5):
        stencils = np.lib.stride_tricks.sliding_window_view(row, 6)
        alpha = alpha_max(model, float(history[-1].min()), float(history[-1].max()))
        fluxfn = eno3_flux if scheme.kind == ENO3 else weno5_flux
        return fluxfn(model, stencils, alpha)
    ul = row[:-1]
    ur = row[1:]
    if scheme.kind == GODUNOV:
        return godunov_flux(model, ul, ur)
    if scheme.kind == ENGQUIST_OSHER:
        return engquist_osher_flux(model, ul, ur)
    return lax_friedrichs_flux(model, ul, ur, grid.dx / grid.dt, scheme.lf_variant)


def fv_step(
    scheme: Scheme,
    model: FluxModel,
    state: np.ndarray,
    boundary: BoundarySpec,
    grid: Grid1D,
    step: int = 0,
    warn_cfl: bool = True,
):
    """One conservative update.

    state is the current row (I,) or a (b, I) history block, oldest first,
    for time-deep neural fluxes (shallow histories are padded by repeating
    the oldest row). Returns (next_row, flux_left, flux_right, cfl_violated,
    max_wave_speed); the accounting fluxes delimit the cells actually
    updated by the conservation form (all cells for ghost extrapolation,
    the interior for prescribed traces).
    """
    history = np.atleast_2d(np.asarray(state, dtype=float))
    depth = scheme.time_depth
    if history.shape[0] < depth:
        pad = np.repeat(history[:1], depth - history.shape[0], axis=0)
        history = np.concatenate((pad, history), axis=0)
    row = history[-1]
    lam = grid.dt / grid.dx
    amax = alpha_max(model, float(row.min()), float(row.max()))
    cfl_bad = lam * amax > 1.0 + 1e-12
    if cfl_bad and warn_cfl:
        warnings.warn(
            f"CFL violated at step {step}: dt/dx * max|f'| = {lam * amax:.3g}",
            CFLWarning,
            stacklevel=2,
        )
    fluxes = _interface_fluxes(scheme, model, history, grid)
    nxt = row - lam * (fluxes[1:] - fluxes[:-1])
    if boundary.kind == PRESCRIBED_TRACES:
        nxt = nxt.copy()
        nxt[0] = boundary.left_trace[step]
        nxt[-1] = boundary.right_trace[step]
        acct_l, acct_r = float(fluxes[1]), float(fluxes[-2])
    else:
        acct_l, acct_r = float(fluxes[0]), float(fluxes[-1])
    if not np.all(np.isfinite(nxt)):
        raise InstabilityError(f"non-finite state after step {step}", step)
    return nxt, acct_l, acct_r, cfl_bad, amax


def rollout(
    scheme: Scheme,
    model: FluxModel,
    initial_row: np.ndarray,
    boundary: BoundarySpec,
    grid: Grid1D,
    collect_diagnostics: bool = False,
    warn_cfl: bool = True,
):
    """Autoregressive rollout of n_steps conservative updates."""
    u0 = np.asarray(initial_row, dtype=float)
    if u0.shape != (grid.n_cells,):
        raise ConfigError("initial row does not match the grid")
    boundary.check_length(grid.n_steps)
    b = scheme.time_depth
    values = np.empty((grid.n_steps + 1, grid.n_cells))
    values[0] = u0
    diag = RolloutDiagnostics(
        boundary_flux_left=np.empty(grid.n_steps),
        boundary_flux_right=np.empty(grid.n_steps),
    )
    warned = False
    for n in range(grid.n_steps):
        first = max(0, n - b + 1)
        history = values[first : n + 1]
        nxt, fl, fr, cfl_bad, amax = fv_step(
            scheme, model, history, boundary, grid, step=n,
            warn_cfl=warn_cfl and not warned,
        )
        warned = warned or cfl_bad
        values[n + 1] = nxt
        diag.boundary_flux_left[n] = fl
        diag.boundary_flux_right[n] = fr
        diag.cfl_violations += int(cfl_bad)
        diag.max_wave_speed = max(diag.max_wave_speed, amax)
    out = Field(grid, values)
    return (out, diag) if collect_diagnostics else out


def conservation_defect(fld: Field, diag: RolloutDiagnostics, boundary: BoundarySpec) -> float:
    """Max relative mismatch between interior mass change and boundary fluxes.

    Relative to max(1, |initial interior mass|) so near-zero-mass signed
    data (Burgers) stays well-scaled.
    """
    g = fld.grid
    sl = slice(1, -1) if boundary.kind == PRESCRIBED_TRACES else slice(None)
    interior = fld.values[:, sl].sum(axis=1) * g.dx
    influx = np.concatenate(
        ([0.0], np.cumsum(diag.boundary_flux_left - diag.boundary_flux_right) * g.dt)
    )
    defect = np.abs((interior - interior[0]) - influx)
    return float(defect.max() / max(1.0, abs(interior[0])))
