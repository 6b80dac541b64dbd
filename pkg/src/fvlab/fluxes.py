"""Flux functions f(u) for the scalar conservation law u_t + f(u)_x = 0.

Seven models ship: six traffic fundamental diagrams (Greenshields,
Triangular1, Triangular2, Trapezoidal, Greenberg, Underwood), all concave
on their density domain, and the convex Burgers flux f(u) = u^2 / 2.

Parameter keys (documented here; only the subset used by a model applies):
    v_max   free-flow speed
    rho_max jam density (right end of the density domain)
    rho_c   critical density (kink of the triangular diagrams)
    w       congested wave speed (negative)
    rho_1, rho_2  breakpoints of the trapezoidal diagram
    c_0     Greenberg speed scale
    c_1, c_2      Underwood scale and decay rate

Shipped defaults are the normalized values (rho_max = 1 etc.); models are
stored denormalized so calibrated parameter sets round-trip exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

FLUX_NAMES = (
    "greenshields",
    "triangular1",
    "triangular2",
    "trapezoidal",
    "greenberg",
    "underwood",
    "burgers",
)

# Greenberg's u*log(rho_max/u) is singular at 0; below this floor the flux
# is defined as its limit 0 and the derivative is frozen at its floor value.
GREENBERG_FLOOR = 1e-12

_DEFAULTS = {
    "greenshields": {"v_max": 1.0, "rho_max": 1.0},
    "triangular1": {"v_max": 1.0, "rho_c": 0.5, "rho_max": 1.0, "w": -1.0},
    "triangular2": {"v_max": 2.0, "rho_c": 1.0 / 3.0, "rho_max": 1.0, "w": -1.0},
    "trapezoidal": {
        "v_max": 1.0, "rho_1": 0.2, "rho_2": 0.8, "rho_max": 1.0, "w": -1.5,
    },
    "greenberg": {"c_0": 2.0, "rho_max": 1.0},
    "underwood": {"c_1": 0.25, "c_2": 1.0, "rho_max": 1.0},
    "burgers": {},
}

# Count of out-of-domain arguments clamped before flux evaluation, kept per
# process so unstable rollouts remain observable without aborting them.
_clamp_events = 0


def clamp_count() -> int:
    return _clamp_events


def reset_clamp_count() -> None:
    global _clamp_events
    _clamp_events = 0


@dataclass(frozen=True)
class FluxModel:
    """A named flux with parameters, admissible domain, and convexity tag."""

    name: str
    params: Mapping[str, float]
    domain: tuple[float, float]
    convexity: str  # "concave" or "convex"

    def __post_init__(self):
        if self.name not in FLUX_NAMES:
            raise ValueError(f"unknown flux model {self.name!r}")
        if self.convexity not in ("concave", "convex"):
            raise ValueError(f"bad convexity tag {self.convexity!r}")

    def p(self, key: str) -> float:
        return float(self.params[key])


def make_flux(name: str, **overrides: float) -> FluxModel:
    """Build a flux model from shipped defaults plus parameter overrides."""
    name = name.lower()
    if name not in FLUX_NAMES:
        raise ValueError(f"unknown flux model {name!r}")
    params = dict(_DEFAULTS[name])
    for key, value in overrides.items():
        if key not in params:
            raise ValueError(f"model {name!r} takes no parameter {key!r}")
        params[key] = float(value)
    if name == "burgers":
        # Symmetric admissible range; u is a generic conserved quantity here.
        return FluxModel(name, params, (-2.0, 2.0), "convex")
    rho_max = params["rho_max"]
    return FluxModel(name, params, (0.0, rho_max), "concave")


def flux_from_spec(spec: str) -> FluxModel:
    """Parse a plain-text preset: a model name followed by key=value pairs.

    Example: ``"greenshields v_max=0.7 rho_max=1"``.
    """
    parts = spec.split()
    if not parts:
        raise ValueError("empty flux spec")
    overrides = {}
    for item in parts[1:]:
        if "=" not in item:
            raise ValueError(f"malformed flux parameter {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = float(value)
    return make_flux(parts[0].strip(), **overrides)


def _clamp(model: FluxModel, u):
    global _clamp_events
    arr = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite input to flux model {model.name!r}")
    lo, hi = model.domain
    outside = int(np.count_nonzero(arr < lo) + np.count_nonzero(arr > hi))
    if outside:
        _clamp_events += outside
        arr = np.clip(arr, lo, hi)
    return arr


def _as_input(u, arr):
    return float(arr) if np.isscalar(u) or np.ndim(u) == 0 else arr


def evaluate(model: FluxModel, u):
    """Flux f(u); accepts scalars or arrays, clamping u into the domain."""
    r = _clamp(model, u)
    p = model.params
    name = model.name
    if name == "greenshields":
        out = p["v_max"] * r * (1.0 - r / p["rho_max"])
    elif name in ("triangular1", "triangular2"):
        out = np.where(r < p["rho_c"], p["v_max"] * r, p["w"] * (r - p["rho_max"]))
    elif name == "trapezoidal":
        mid = _trapezoid_mid_slope(model) * (r - p["rho_1"]) + p["v_max"] * p["rho_1"]
        out = np.where(
            r < p["rho_1"],
            p["v_max"] * r,
            np.where(r <= p["rho_2"], mid, p["w"] * (r - p["rho_max"])),
        )
    elif name == "greenberg":
        safe = np.maximum(r, GREENBERG_FLOOR)
        out = np.where(
            r <= GREENBERG_FLOOR, 0.0, p["c_0"] * safe * np.log(p["rho_max"] / safe)
        )
    elif name == "underwood":
        out = p["c_1"] * r * np.exp(1.0 - p["c_2"] * r)
    else:  # burgers
        out = 0.5 * r * r
    return _as_input(u, out)


def _trapezoid_mid_slope(model: FluxModel) -> float:
    p = model.params
    return (p["w"] * (p["rho_2"] - p["rho_max"]) - p["v_max"] * p["rho_1"]) / (
        p["rho_2"] - p["rho_1"]
    )


def derivative(model: FluxModel, u):
    """Wave speed f'(u); left one-sided value at kinks of piecewise models."""
    r = _clamp(model, u)
    p = model.params
    name = model.name
    if name == "greenshields":
        out = p["v_max"] * (1.0 - 2.0 * r / p["rho_max"])
    elif name in ("triangular1", "triangular2"):
        out = np.where(r <= p["rho_c"], p["v_max"], p["w"])
    elif name == "trapezoidal":
        m2 = _trapezoid_mid_slope(model)
        out = np.where(r <= p["rho_1"], p["v_max"], np.where(r <= p["rho_2"], m2, p["w"]))
    elif name == "greenberg":
        safe = np.maximum(r, GREENBERG_FLOOR)
        out = p["c_0"] * (np.log(p["rho_max"] / safe) - 1.0)
    elif name == "underwood":
        out = p["c_1"] * np.exp(1.0 - p["c_2"] * r) * (1.0 - p["c_2"] * r)
    else:  # burgers
        out = r.copy() if isinstance(r, np.ndarray) else r
    return _as_input(u, out)


def derivative_onesided(model: FluxModel, u: float) -> tuple[float, float]:
    """(left, right) one-sided derivatives; they differ only at kinks."""
    left = derivative(model, u)
    p = model.params
    name = model.name
    right = left
    if name in ("triangular1", "triangular2") and u == p["rho_c"]:
        right = p["w"]
    elif name == "trapezoidal":
        if u == p["rho_1"]:
            right = _trapezoid_mid_slope(model)
        elif u == p["rho_2"]:
            right = p["w"]
    return float(left), float(right)


def kinks(model: FluxModel) -> tuple[float, ...]:
    """Interior abscissae where f' jumps (empty for smooth models)."""
    p = model.params
    if model.name in ("triangular1", "triangular2"):
        return (p["rho_c"],)
    if model.name == "trapezoidal":
        return (p["rho_1"], p["rho_2"])
    return ()


def critical_density(model: FluxModel) -> float:
    """Argmax of f over the domain (the flow-maximizing density)."""
    p = model.params
    lo, hi = model.domain
    name = model.name
    if name == "greenshields":
        return 0.5 * p["rho_max"]
    if name in ("triangular1", "triangular2"):
        return p["rho_c"]
    if name == "trapezoidal":
        # Max sits on a kink or endpoint of the piecewise-linear graph.
        cands = [lo, p["rho_1"], p["rho_2"], hi]
        vals = [evaluate(model, c) for c in cands]
        return float(cands[int(np.argmax(vals))])
    if name == "greenberg":
        return p["rho_max"] / math.e
    if name == "underwood":
        return float(min(1.0 / p["c_2"], hi))
    # Burgers: f is even, so the max over the symmetric domain is attained at
    # both endpoints; the positive one is returned for determinism.
    return hi


def argmax_scan(model: FluxModel, samples: int = 100_000, tol: float = 1e-10) -> float:
    """Argmax of f by dense scan plus golden-section refinement.

    Independent route used to cross-check the analytic critical densities.
    """
    lo, hi = model.domain
    xs = np.linspace(lo, hi, samples)
    k = int(np.argmax(evaluate(model, xs)))
    a = xs[max(k - 1, 0)]
    b = xs[min(k + 1, samples - 1)]
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    while b - a > tol:
        if evaluate(model, c) >= evaluate(model, d):
            b, d = d, c
            c = b - invphi * (b - a)
        else:
            a, c = c, d
            d = a + invphi * (b - a)
    return 0.5 * (a + b)


def sonic_point(model: FluxModel) -> float:
    """Stationary point of f (f' = 0), used by Godunov and the |f'| split.

    For the concave traffic models this is the critical density; for the
    convex Burgers flux it is the minimum at u = 0.
    """
    if model.name == "burgers":
        return 0.0
    return critical_density(model)


def alpha_max(model: FluxModel, lo: float, hi: float) -> float:
    """max |f'(u)| over [lo, hi] intersected with the domain.

    Exact for the shipped models: every one has monotone f' between kinks,
    so the max sits at an interval endpoint or a kink.
    """
    if hi < lo:
        lo, hi = hi, lo
    d0, d1 = model.domain
    lo = max(lo, d0)
    hi = min(hi, d1)
    cands = [lo, hi] + [k for k in kinks(model) if lo < k < hi]
    best = 0.0
    for c in cands:
        dl, dr = derivative_onesided(model, c)
        best = max(best, abs(dl), abs(dr))
    return best
