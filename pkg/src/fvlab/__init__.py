"""1-D scalar conservation-law laboratory.

Submodules:
    fluxes    -- flux functions (six traffic fundamental diagrams + Burgers)
    grid      -- uniform space-time mesh, fields, projection, error metrics
    schemes   -- classical finite-volume fluxes and the conservative stepper
    exact     -- exact Riemann solutions and the variational reference solver
    neural    -- learned interface flux: network, autodiff tape, Adam
    training  -- datasets, supervised / weak-form losses, curriculum training
    fielddata -- trajectory-to-density pipeline and flux calibration
    bench     -- benchmark reports, win-rate matrices, convergence sweeps
    cli       -- command-line entry points
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "fluxes", "grid", "schemes", "exact", "neural", "training",
    "fielddata", "bench", "cli",
)


def __getattr__(name):
    # Lazy imports keep `import fvlab` free of numpy so the CLI can pin
    # BLAS thread counts before numpy is first loaded.
    if name in _SUBMODULES:
        import importlib

        module = importlib.import_module(f".{name}", __name__)
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
