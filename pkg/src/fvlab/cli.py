"""Command-line entry points.

Argument handling happens before any numeric import: --threads is read by
a raw argv scan and written into the BLAS environment variables, because
numpy binds its thread pools on first import. Everything else loads
lazily inside the command handlers.

Exit codes: 0 success, 2 configuration error, 3 numerical instability,
4 I/O error.

Configuration files are INI-style; command-line flags take precedence
over config values, which take precedence over defaults. See
docs/formats.md for the file formats and configs/ for presets.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_UNSTABLE = 3
EXIT_IO = 4

_BLAS_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def _pin_threads(argv) -> None:
    threads = "1"
    for i, tok in enumerate(argv):
        if tok == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif tok.startswith("--threads="):
            threads = tok.partition("=")[2]
    try:
        int(threads)
    except ValueError:
        return  # argparse reports the bad value later
    for var in _BLAS_VARS:
        os.environ[var] = threads


# ---------------------------------------------------------------------------
# Config plumbing


def _load_config(path):
    cfg = configparser.ConfigParser()
    if path is not None:
        with open(path, "r", encoding="ascii") as fh:
            cfg.read_file(fh)
    return cfg


def _cfg_get(cfg, section: str, key: str, default=None):
    if cfg.has_option(section, key):
        return cfg.get(section, key)
    return default


def _floats(text: str):
    return [float(tok) for tok in text.replace(",", " ").split()]


def _build_flux(cfg, override=None):
    from .fluxes import flux_from_spec

    spec = override or _cfg_get(cfg, "run", "flux", "greenshields")
    return flux_from_spec(spec)


def _build_grid(cfg):
    from .grid import Grid1D

    return Grid1D(
        dx=float(_cfg_get(cfg, "grid", "dx", "0.01")),
        dt=float(_cfg_get(cfg, "grid", "dt", "0.005")),
        n_cells=int(_cfg_get(cfg, "grid", "cells", "100")),
        n_steps=int(_cfg_get(cfg, "grid", "steps", "50")),
        x0=float(_cfg_get(cfg, "grid", "x0", "0.0")),
    )


def _build_ic(cfg):
    from .exact import PiecewiseConstantIC
    from .grid import ConfigError

    values = _cfg_get(cfg, "ic", "values")
    if values is None:
        raise ConfigError("config needs an [ic] section with values")
    breakpoints = _floats(_cfg_get(cfg, "ic", "breakpoints", ""))
    return PiecewiseConstantIC(breakpoints, _floats(values))


def _build_scheme(spec: str, cfg):
    """'godunov', 'lax_friedrichs[:variant]', 'eno3', ..., or 'nfv:<path>'."""
    from . import schemes
    from .grid import ConfigError

    name, _, extra = spec.partition(":")
    name = name.strip().lower()
    if name in ("nfv", "unfv", "neural"):
        from .neural import load_checkpoint, neural_scheme

        if not extra:
            raise ConfigError(f"scheme {spec!r} needs a checkpoint path")
        arch, params = load_checkpoint(extra.strip())
        return neural_scheme(arch, params)
    if name == "lax_friedrichs":
        variant = extra.strip() or schemes.LF_STANDARD
        return schemes.Scheme(kind=name, lf_variant=variant)
    if name in schemes.CLASSICAL_KINDS:
        return schemes.Scheme(kind=name)
    raise ConfigError(f"unknown scheme {spec!r}")


def _out_dir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_solve(args, cfg) -> int:
    from .bench import emit_heatmap
    from .grid import BoundarySpec, write_field_csv
    from .schemes import rollout

    model = _build_flux(cfg, args.flux)
    grid = _build_grid(cfg)
    scheme = _build_scheme(args.scheme or _cfg_get(cfg, "run", "scheme", "godunov"), cfg)
    ic = _build_ic(cfg)
    fld = rollout(scheme, model, ic.cell_averages(grid), BoundarySpec(), grid)
    out = _out_dir(args)
    write_field_csv(fld, os.path.join(out, "field.csv"))
    emit_heatmap(fld, os.path.join(out, "field.ppm"))
    print(f"solve: {scheme.name} on {model.name}, "
          f"{grid.n_steps} steps -> {out}/field.csv")
    return EXIT_OK


def _cmd_reference(args, cfg) -> int:
    from .bench import emit_heatmap
    from .exact import exact_reference
    from .grid import write_field_csv

    model = _build_flux(cfg, args.flux)
    grid = _build_grid(cfg)
    ic = _build_ic(cfg)
    fld = exact_reference(model, ic, grid)
    out = _out_dir(args)
    write_field_csv(fld, os.path.join(out, "reference.csv"))
    emit_heatmap(fld, os.path.join(out, "reference.ppm"))
    print(f"reference: {model.name}, {grid.n_steps} steps -> {out}/reference.csv")
    return EXIT_OK


def _cmd_train(args, cfg) -> int:
    from .neural import NfvArchitecture, save_checkpoint
    from .training import (
        TrainConfig,
        sample_riemann_dataset,
        train,
        training_grid,
    )

    model = _build_flux(cfg, args.flux)
    seed = args.seed if args.seed is not None else int(_cfg_get(cfg, "train", "seed", "0"))
    arch = NfvArchitecture(
        a=int(_cfg_get(cfg, "train", "a", "3")),
        b=int(_cfg_get(cfg, "train", "b", "1")),
    )
    grid = training_grid(n_steps=int(_cfg_get(cfg, "train", "grid_steps", "50")))
    dataset = sample_riemann_dataset(
        model,
        int(_cfg_get(cfg, "train", "dataset_size", "100")),
        seed=int(_cfg_get(cfg, "train", "dataset_seed", "0")),
        grid=grid,
    )
    config = TrainConfig(
        objective=_cfg_get(cfg, "train", "objective", "supervised"),
        epochs=int(_cfg_get(cfg, "train", "epochs", "120")),
        horizons=tuple(int(h) for h in _floats(_cfg_get(cfg, "train", "horizons", "10 50"))),
        fracs=tuple(_floats(_cfg_get(cfg, "train", "fracs", "0.6 0.4"))),
        batch_size=int(_cfg_get(cfg, "train", "batch_size", "8")),
        lr_start=float(_cfg_get(cfg, "train", "lr_start", "1e-3")),
        lr_end=float(_cfg_get(cfg, "train", "lr_end", "1e-6")),
        seed=seed,
        n_testfns=int(_cfg_get(cfg, "train", "n_testfns", "250")),
    )
    params, log = train(arch, model, dataset, config)
    out = _out_dir(args)
    ckpt = os.path.join(out, f"{arch.label}.nfvw")
    save_checkpoint(ckpt, arch, params, {
        "flux": model.name,
        "objective": config.objective,
        "epochs": str(config.epochs),
        "seed": str(seed),
    })
    log.to_csv(os.path.join(out, "training_log.csv"))
    last = log.rows[-1]["loss"] if log.rows else float("nan")
    print(f"train: {arch.label} {config.objective} on {model.name}, "
          f"{config.epochs} epochs, final loss {last:.6g} -> {ckpt}")
    return EXIT_OK


def _eval_report(args, cfg):
    from .bench import run_benchmark

    model = _build_flux(cfg, args.flux)
    specs = _cfg_get(cfg, "run", "schemes", "godunov lax_friedrichs")
    schemes = [_build_scheme(s, cfg) for s in specs.split()]
    seed = args.seed if args.seed is not None else int(_cfg_get(cfg, "eval", "seed", "1000"))
    grid = _build_grid(cfg) if cfg.has_section("grid") else None
    return run_benchmark(
        model,
        schemes,
        n_instances=int(_cfg_get(cfg, "eval", "instances", "100")),
        seed=seed,
        grid=grid,
    )


def _cmd_eval(args, cfg) -> int:
    report = _eval_report(args, cfg)
    out = _out_dir(args)
    _write_text(os.path.join(out, "report.csv"), report.to_csv())
    line = "  ".join(f"{lab}={report.mean['l2'][lab]:.3e}" for lab in report.labels)
    print(f"eval: mean L2  {line} -> {out}/report.csv")
    return EXIT_OK


def _cmd_winrate(args, cfg) -> int:
    from .bench import win_rate

    report = _eval_report(args, cfg)
    matrix = win_rate(report)
    out = _out_dir(args)
    _write_text(os.path.join(out, "report.csv"), report.to_csv())
    _write_text(os.path.join(out, "winrate.csv"), matrix.to_csv())
    print(f"winrate: {len(matrix.labels)} schemes -> {out}/winrate.csv")
    return EXIT_OK


def _cmd_converge(args, cfg) -> int:
    from .bench import convergence_sweep

    model = _build_flux(cfg, args.flux)
    scheme = _build_scheme(args.scheme or _cfg_get(cfg, "run", "scheme", "godunov"), cfg)
    seed = args.seed if args.seed is not None else int(_cfg_get(cfg, "sweep", "seed", "1000"))
    result = convergence_sweep(
        scheme,
        model,
        _floats(_cfg_get(cfg, "sweep", "dt_list", "1e-4 2e-4 5e-4 1e-3")),
        ratio=float(_cfg_get(cfg, "sweep", "ratio", "0.1")),
        n_instances=int(_cfg_get(cfg, "sweep", "instances", "20")),
        seed=seed,
        x_end=float(_cfg_get(cfg, "sweep", "x_end", "1.0")),
        t_end=float(_cfg_get(cfg, "sweep", "t_end", "0.25")),
    )
    out = _out_dir(args)
    _write_text(os.path.join(out, "convergence.csv"), result.to_csv())
    print(f"converge: slope {result.slope:.3f} over {len(result.dt_list)} "
          f"step sizes -> {out}/convergence.csv")
    return EXIT_OK


def _cmd_ingest(args, cfg) -> int:
    from .bench import emit_heatmap
    from .fielddata import (
        bin_density,
        read_trajectories,
        repair_gaps,
        smooth_and_normalize,
    )
    from .grid import write_field_csv

    if not args.input:
        from .grid import ConfigError

        raise ConfigError("ingest needs --input trajectories.jsonl")
    records = read_trajectories(args.input)
    raw = bin_density(
        records,
        x0=float(_cfg_get(cfg, "ingest", "x0", "0.0")),
        x_end=float(_cfg_get(cfg, "ingest", "x_end", "1.0")),
        t0=float(_cfg_get(cfg, "ingest", "t0", "0.0")),
        t_end=float(_cfg_get(cfg, "ingest", "t_end", "600.0")),
    )
    fld = smooth_and_normalize(raw)
    missing = _cfg_get(cfg, "ingest", "missing_columns", "")
    if missing.strip():
        fld = repair_gaps(fld, [int(c) for c in missing.split()])
    out = _out_dir(args)
    write_field_csv(fld.as_field(), os.path.join(out, "density.csv"))
    emit_heatmap(fld.values, os.path.join(out, "density.ppm"))
    print(f"ingest: {len(records)} trajectories -> {out}/density.csv "
          f"({fld.values.shape[0]}x{fld.values.shape[1]})")
    return EXIT_OK


def _cmd_calibrate(args, cfg) -> int:
    from .fielddata import calibrate_flux, read_density_csv

    if not args.input:
        from .grid import ConfigError

        raise ConfigError("calibrate needs --input density.csv")
    fld = read_density_csv(args.input)
    seed = args.seed if args.seed is not None else int(_cfg_get(cfg, "calibrate", "seed", "0"))
    family = _cfg_get(cfg, "calibrate", "family", "greenshields")
    horizon = _cfg_get(cfg, "calibrate", "horizon")
    fitted, report = calibrate_flux(
        family,
        fld,
        horizon=int(horizon) if horizon else None,
        n_starts=int(_cfg_get(cfg, "calibrate", "starts", "16")),
        max_evals=int(_cfg_get(cfg, "calibrate", "max_evals", "500")),
        seed=seed,
    )
    out = _out_dir(args)
    _write_text(os.path.join(out, "calibration.txt"), report.to_text())
    _write_text(os.path.join(out, "calibration.csv"), report.to_csv())
    flag = " (degenerate)" if report.degenerate else ""
    print(f"calibrate: {family} error {report.error:.6g}{flag} -> "
          f"{out}/calibration.txt")
    return EXIT_OK


def _cmd_synth(args, cfg) -> int:
    from .fielddata import synth_trajectories, write_trajectories

    scenario = args.scenario or _cfg_get(cfg, "synth", "scenario", "free_flow")
    seed = args.seed if args.seed is not None else int(_cfg_get(cfg, "synth", "seed", "0"))
    records = synth_trajectories(scenario, seed=seed)
    out = _out_dir(args)
    path = os.path.join(out, "trajectories.jsonl")
    write_trajectories(records, path)
    print(f"synth: {scenario} -> {len(records)} trajectories -> {path}")
    return EXIT_OK


_COMMANDS = {
    "solve": _cmd_solve,
    "reference": _cmd_reference,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "winrate": _cmd_winrate,
    "converge": _cmd_converge,
    "ingest": _cmd_ingest,
    "calibrate": _cmd_calibrate,
    "synth": _cmd_synth,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fvlab",
        description="1-D conservation-law laboratory",
    )
    p.add_argument("command", choices=sorted(_COMMANDS))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--flux", default=None, help="flux spec, e.g. 'greenshields v_max=1'")
    p.add_argument("--scheme", default=None)
    p.add_argument("--scenario", default=None)
    p.add_argument("--input", default=None)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _pin_threads(argv)
    args = _parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
    except OSError as exc:
        print(f"fvlab: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    except (configparser.Error, UnicodeDecodeError) as exc:
        print(f"fvlab: bad config: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    from .grid import ConfigError
    from .schemes import InstabilityError
    from .training import TrainingDiverged

    try:
        return _COMMANDS[args.command](args, cfg)
    except (InstabilityError, TrainingDiverged, FloatingPointError) as exc:
        print(f"fvlab: numerical instability: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE
    except OSError as exc:
        print(f"fvlab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as exc:
        print(f"fvlab: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
