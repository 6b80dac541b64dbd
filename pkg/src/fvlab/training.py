"""Datasets, losses, test-function machinery, and curriculum training.

Supervised training regresses rollouts against exact entropy references;
the unsupervised objective replaces references with a weak-form residual
integrated against a fixed family of compactly supported polynomials, so
it needs no labels at all. Both objectives backpropagate through the full
autoregressive rollout (no truncation; horizons and parameter counts keep
the tape small).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import chebyshev as _cheb
from numpy.polynomial.legendre import leggauss

from . import neural as nr
from .exact import (
    PiecewiseConstantIC,
    exact_reference,
    fine_reference_grid,
    riemann_field,
    riemann_ic,
)
from .fluxes import FluxModel, evaluate
from .grid import ConfigError, Field, Grid1D, l2_error, project_fine_to_coarse

TRAIN_DX = 1e-2
TRAIN_DT = 5e-3
TRAIN_CELLS = 100
TRAIN_STEPS = 250

# jumps smaller than this are filtered out of the Riemann sampler: they
# produce near-constant problems that teach the net nothing
MIN_JUMP = 0.05

DEFAULT_HORIZONS = (10, 25, 60, 120, 250)
DEFAULT_FRACS = (0.60, 0.15, 0.10, 0.10, 0.05)


def training_grid(n_steps: int = TRAIN_STEPS) -> Grid1D:
    return Grid1D(dx=TRAIN_DX, dt=TRAIN_DT, n_cells=TRAIN_CELLS, n_steps=n_steps)


@dataclass(frozen=True)
class RiemannDataset:
    model: FluxModel
    grid: Grid1D
    seed: int
    entries: List[Tuple[PiecewiseConstantIC, Field]]


@dataclass(frozen=True)
class EvalDataset:
    model: FluxModel
    grid: Grid1D
    seed: int
    entries: List[Tuple[PiecewiseConstantIC, Field, Field]]  # (ic, fine, coarse)


def sample_riemann_dataset(
    model: FluxModel, n: int, seed: int, grid: Optional[Grid1D] = None
) -> RiemannDataset:
    """n single-jump problems; references are exact solutions cell-averaged
    onto the training grid via the Riemann evaluator."""
    if n < 1:
        raise ConfigError("dataset size must be >= 1")
    grid = training_grid() if grid is None else grid
    rng = np.random.default_rng(seed)
    lo, hi = model.domain
    entries = []
    for _ in range(n):
        while True:
            ul, ur = rng.uniform(lo, hi, 2)
            if abs(ur - ul) >= MIN_JUMP:
                break
        x_jump = rng.uniform(grid.x0, grid.x_end)
        ic = riemann_ic(x_jump, ul, ur)
        entries.append((ic, riemann_field(model, ul, ur, x_jump, grid)))
    return RiemannDataset(model=model, grid=grid, seed=seed, entries=entries)


def sample_eval_ics(
    model: FluxModel, n: int, seed: int, domain: tuple[float, float]
) -> list[PiecewiseConstantIC]:
    """n ten-jump initial conditions with values across the model's range."""
    if n < 1:
        raise ConfigError("dataset size must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = model.domain
    ics = []
    for _ in range(n):
        while True:
            bp = np.sort(rng.uniform(domain[0], domain[1], 10))
            if np.all(np.diff(bp) > 1e-12):
                break
        values = rng.uniform(lo, hi, 11)
        ics.append(PiecewiseConstantIC(breakpoints=bp, values=values))
    return ics


def sample_eval_dataset(
    model: FluxModel, n: int, seed: int, grid: Optional[Grid1D] = None
) -> EvalDataset:
    """n ten-jump problems; references solved exactly on the fine grid and
    projected back to the coarse one."""
    grid = training_grid(n_steps=50) if grid is None else grid
    fine_grid = fine_reference_grid(grid)
    entries = []
    for ic in sample_eval_ics(model, n, seed, (grid.x0, grid.x_end)):
        fine = exact_reference(model, ic, fine_grid)
        coarse = project_fine_to_coarse(fine, grid)
        entries.append((ic, fine, coarse))
    return EvalDataset(model=model, grid=grid, seed=seed, entries=entries)


def supervised_loss(pred, ref) -> float:
    """Mean squared error over included cells; lists average entrywise."""
    if isinstance(pred, (list, tuple)):
        if len(pred) != len(ref):
            raise ConfigError("batch lengths disagree")
        return float(np.mean([l2_error(p, r) for p, r in zip(pred, ref)]))
    return l2_error(pred, ref)


# ---------------------------------------------------------------------------
# Test functions (compactly supported polynomials, Chebyshev basis)

_GL_NODES, _GL_WEIGHTS = leggauss(32)  # exact for polynomial degree <= 63


@dataclass(frozen=True)
class TestFunction:
    """phi(x) = degree-<=50 polynomial on [alpha, beta], zero outside.

    Stored as a Chebyshev series in the scaled variable
    t = (2x - (alpha+beta)) / (beta - alpha); the (x-alpha)(beta-x) factor
    is folded into the series, so compact support is structural.
    """

    alpha: float
    beta: float
    coeffs: np.ndarray

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        t = (2.0 * x - (self.alpha + self.beta)) / (self.beta - self.alpha)
        inside = (x >= self.alpha) & (x <= self.beta)
        vals = np.where(inside, _cheb.chebval(np.clip(t, -1.0, 1.0), self.coeffs), 0.0)
        return vals if vals.ndim else float(vals)

    def scaled(self, factor: float) -> "TestFunction":
        return TestFunction(self.alpha, self.beta, self.coeffs * factor)

    def cell_integrals(self, grid: Grid1D) -> np.ndarray:
        """Exact integral of phi over each cell (32-node Gauss-Legendre on
        the cell/support intersection, exact for the degree in play)."""
        edges = grid.interfaces()
        lo = np.clip(edges[:-1], self.alpha, self.beta)
        hi = np.clip(edges[1:], self.alpha, self.beta)
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        pts = mid[:, None] + half[:, None] * _GL_NODES[None, :]
        return (self(pts) * _GL_WEIGHTS[None, :]).sum(axis=1) * half

    def interface_differences(self, grid: Grid1D) -> np.ndarray:
        """phi(right edge) - phi(left edge) per cell."""
        vals = self(grid.interfaces())
        return vals[1:] - vals[:-1]


def sample_test_function(domain: Tuple[float, float], seed_or_rng) -> TestFunction:
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    x0, x1 = float(domain[0]), float(domain[1])
    if not x1 > x0:
        raise ConfigError("empty test-function domain")
    while True:
        a, b = np.sort(rng.uniform(x0, x1, 2))
        if b - a >= 0.2 * (x1 - x0):
            break
    inner = rng.uniform(-1.0, 1.0, 49)  # degree <= 48
    # (x-alpha)(beta-x) is proportional to 1 - t^2 = T0/2 - T2/2
    coeffs = _cheb.chebmul(inner, np.array([0.5, 0.0, -0.5]))
    # exact sup-norm: extrema are derivative roots plus endpoints (phi=0 there)
    roots = _cheb.chebroots(_cheb.chebder(coeffs))
    roots = roots[np.abs(roots.imag) < 1e-9].real
    roots = roots[(roots >= -1.0) & (roots <= 1.0)]
    cand = np.concatenate((roots, [-1.0, 1.0]))
    peak = np.abs(_cheb.chebval(cand, coeffs)).max()
    return TestFunction(alpha=float(a), beta=float(b), coeffs=coeffs / peak)


def sample_test_functions(
    domain: Tuple[float, float], n: int, seed: int
) -> List[TestFunction]:
    rng = np.random.default_rng(seed)
    return [sample_test_function(domain, rng) for _ in range(n)]


def testfn_matrices(testfns: Sequence[TestFunction], grid: Grid1D):
    """(cell integral, interface difference) matrices, one column per phi."""
    if not testfns:
        raise ConfigError("need at least one test function")
    iphi = np.column_stack([tf.cell_integrals(grid) for tf in testfns])
    dphi = np.column_stack([tf.interface_differences(grid) for tf in testfns])
    return iphi, dphi


def weak_residual_loss(
    pred: Field,
    model: FluxModel,
    testfns: Sequence[TestFunction],
    grid: Grid1D,
    aggregation: str = "stepwise",
) -> float:
    """Weak-form residual of a predicted field against the test family.

    Per phi and per step n >= 1 the spatial residual is
        sum_i [ (u_i^n - u_i^{n-1})/dt * int_{I_i} phi  +  f(u_i^n) * [phi]_i ]
    with the jump bracket oriented inward, [phi]_i = phi(x_{i-1/2}) -
    phi(x_{i+1/2}). That orientation is forced: summation by parts turns the
    flux term into +integral(f phi') only with it, which is what cancels the
    time term for solutions of the conservation law. With the outward
    orientation the residual would test the time-reversed equation and grow
    under refinement instead of vanishing.

    'stepwise' squares each per-step residual and sums over n (the display
    form); 'sum_then_square' sums residuals over n first, then squares.
    Either way the result is averaged over test functions.
    """
    if pred.values.shape != (grid.n_steps + 1, grid.n_cells):
        raise ConfigError("field does not live on the stated grid")
    if aggregation not in ("stepwise", "sum_then_square"):
        raise ConfigError(f"unknown aggregation {aggregation!r}")
    iphi, dphi = testfn_matrices(testfns, grid)
    u = pred.values
    du = (u[1:] - u[:-1]) / grid.dt          # (n_steps, I)
    fu = evaluate(model, u[1:])              # flux at the new level
    resid = du @ iphi - fu @ dphi            # (n_steps, M); dphi is outward

    if aggregation == "stepwise":
        per_phi = (resid**2).sum(axis=0)
    else:
        per_phi = resid.sum(axis=0) ** 2
    return float(per_phi.mean())


# ---------------------------------------------------------------------------
# Taped rollout and training losses


def _taped_rollout(arch, params_var, u0: np.ndarray, model, grid: Grid1D, horizon: int):
    """Autoregressive neural rollout recorded on the tape.

    u0: (B, I) batch of initial rows. Returns a list of Vars, one per time
    level 0..horizon, each (B, I). Boundaries extrapolate (free outflow),
    matching the inference-path rollout.
    """
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    n_cells = u0.shape[1]
    n_ifaces = n_cells + 1
    g = (arch.a - 1) // 2
    lam = grid.dt / grid.dx
    cur = nr.Var(u0)
    hist = [cur] * arch.b  # oldest..newest; before step 1 all levels equal u0
    rows = [cur]
    for _ in range(horizon):
        slices = []
        for row in hist:
            padded = nr.concat_cols(
                [nr.getcols(row, 0, 1)] * g
                + [row]
                + [nr.getcols(row, n_cells - 1, n_cells)] * g
            )
            for k in range(arch.a - 1):
                slices.append(nr.getcols(padded, k, k + n_ifaces))
        block = nr.reshape(nr.stack_last(slices), (-1, arch.in_dim))
        flux = nr.reshape(nr.net_apply(arch, params_var, block), (-1, n_ifaces))
        diff = nr.sub(nr.getcols(flux, 1, n_ifaces), nr.getcols(flux, 0, n_cells))
        nxt = nr.sub(cur, nr.scale(diff, lam))
        hist = hist[1:] + [nxt]
        cur = nxt
        rows.append(cur)
    return rows


def supervised_rollout_loss(rows, refs: np.ndarray):
    """MSE of rollout rows 1..H against reference rows, interior columns
    (consistent with the field-level metric masking)."""
    horizon = len(rows) - 1
    n_cells = refs.shape[2]
    if refs.shape[1] < horizon + 1:
        raise ConfigError("reference has fewer rows than the rollout")
    acc = None
    for n in range(1, horizon + 1):
        d = nr.sub(rows[n], refs[:, n, :])
        if n_cells > 2:
            d = nr.getcols(d, 1, n_cells - 1)
        term = nr.sum_all(nr.square(d))
        acc = term if acc is None else nr.add(acc, term)
    denom = refs.shape[0] * horizon * (n_cells - 2 if n_cells > 2 else n_cells)
    return nr.scale(acc, 1.0 / denom)


def weak_rollout_loss(rows, model, iphi: np.ndarray, dphi: np.ndarray, dt: float):
    """Taped weak-form residual of the rollout (stepwise aggregation).

    Same inward jump orientation as weak_residual_loss: the flux term is
    subtracted because dphi holds outward differences.
    """
    n_batch = rows[0].value.shape[0]
    n_phi = iphi.shape[1]
    acc = None
    for n in range(1, len(rows)):
        du = nr.scale(nr.sub(rows[n], rows[n - 1]), 1.0 / dt)
        fu = nr.flux_term(model, rows[n])
        resid = nr.sub(nr.matmul(du, iphi), nr.matmul(fu, dphi))
        term = nr.sum_all(nr.square(resid))
        acc = term if acc is None else nr.add(acc, term)
    return nr.scale(acc, 1.0 / (n_batch * n_phi))


# ---------------------------------------------------------------------------
# Training loop


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, log):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "supervised"  # or "weak"
    epochs: int = 120
    horizons: Tuple[int, ...] = DEFAULT_HORIZONS
    fracs: Tuple[float, ...] = DEFAULT_FRACS
    batch_size: int = 8
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    seed: int = 0
    n_testfns: int = 250
    divergence_factor: float = 1e3

    def __post_init__(self):
        if self.objective not in ("supervised", "weak"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if len(self.horizons) != len(self.fracs):
            raise ConfigError("horizons and fracs must pair up")
        if abs(sum(self.fracs) - 1.0) > 1e-9:
            raise ConfigError("phase fractions must sum to 1")


@dataclass
class TrainingLog:
    rows: List[dict] = dc_field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("epoch,horizon,lr,loss\n")
            for r in self.rows:
                fh.write(
                    f"{r['epoch']},{r['horizon']},{r['lr']:.17g},{r['loss']:.17g}\n"
                )


def _phase_epochs(epochs: int, fracs: Sequence[float]) -> List[int]:
    counts = [int(round(epochs * f)) for f in fracs]
    counts[-1] += epochs - sum(counts)
    return counts


def train(
    arch: nr.NfvArchitecture,
    model: FluxModel,
    dataset: RiemannDataset,
    config: TrainConfig,
):
    """Curriculum training; returns (params, TrainingLog).

    Supervised phases regress against the dataset references; the weak
    objective ignores them and integrates the rollout against a fixed set
    of test functions sampled once per run.
    """
    grid = dataset.grid
    if max(config.horizons) > grid.n_steps:
        raise ConfigError("curriculum horizon exceeds the dataset grid")
    params = nr.init_params(arch, seed=config.seed)
    log = TrainingLog()
    if config.epochs == 0:
        return params, log

    rng = np.random.default_rng(config.seed + 1)
    u0_all = np.stack([ref.values[0] for _, ref in dataset.entries])
    refs_all = np.stack([ref.values for _, ref in dataset.entries])
    if config.objective == "weak":
        testfns = sample_test_functions(
            (grid.x0, grid.x_end), config.n_testfns, seed=config.seed + 2
        )
        iphi, dphi = testfn_matrices(testfns, grid)

    counts = _phase_epochs(config.epochs, config.fracs)
    n_entries = len(dataset.entries)
    updates_per_epoch = (n_entries + config.batch_size - 1) // config.batch_size
    total_updates = sum(counts) * updates_per_epoch

    adam = nr.AdamState.fresh(params.size)
    initial_loss = None
    step = 0
    epoch = 0
    for horizon, n_epochs in zip(config.horizons, counts):
        for _ in range(n_epochs):
            perm = rng.permutation(n_entries)
            losses = []
            lr = config.lr_start
            for start in range(0, n_entries, config.batch_size):
                idx = perm[start : start + config.batch_size]
                tape = nr.Tape()
                pvar = nr.Var(params, tape)
                rows = _taped_rollout(arch, pvar, u0_all[idx], model, grid, horizon)
                if config.objective == "supervised":
                    loss = supervised_rollout_loss(rows, refs_all[idx])
                else:
                    loss = weak_rollout_loss(rows, model, iphi, dphi, grid.dt)
                loss_val = float(loss.value)
                if not np.isfinite(loss_val):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}", log
                    )
                if initial_loss is None:
                    initial_loss = loss_val
                elif loss_val > config.divergence_factor * max(initial_loss, 1e-30):
                    raise TrainingDiverged(
                        f"loss {loss_val:.3e} exceeds {config.divergence_factor:g}x "
                        f"the initial {initial_loss:.3e} at epoch {epoch}",
                        log,
                    )
                nr.backward(tape, loss)
                lr = nr.lr_schedule(step, total_updates, config.lr_start, config.lr_end)
                params, adam = nr.adam_step(adam, params, pvar.grad, lr)
                step += 1
                losses.append(loss_val)
            log.rows.append(
                {
                    "epoch": epoch,
                    "horizon": horizon,
                    "lr": lr,
                    "loss": float(np.mean(losses)),
                }
            )
            epoch += 1
    return params, log
