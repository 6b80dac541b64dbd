"""CLI tests: every subcommand end to end at nano scale, exit codes,
config precedence, and the checkpoint-backed scheme spec.

main() is called in-process so the tests stay fast and can monkeypatch
the numerics; each invocation gets its own output directory.
"""

import numpy as np
import pytest

import fvlab.schemes
from fvlab.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_UNSTABLE, main
from fvlab.neural import NfvArchitecture, init_params, save_checkpoint
from fvlab.schemes import InstabilityError

TINY = """
[run]
flux = greenshields v_max=1 rho_max=1
scheme = godunov
schemes = godunov lax_friedrichs

[grid]
dx = 0.01
dt = 0.005
cells = 30
steps = 10

[ic]
breakpoints = 0.15
values = 0.8 0.2

[eval]
instances = 3
seed = 7

[sweep]
dt_list = 5e-3 1e-2
ratio = 0.5
instances = 3
seed = 7
t_end = 0.05

[train]
a = 3
b = 1
objective = supervised
epochs = 2
horizons = 2 4
fracs = 0.5 0.5
batch_size = 2
dataset_size = 4
dataset_seed = 0
grid_steps = 10
seed = 0
"""


@pytest.fixture()
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY, encoding="ascii")
    return str(path)


def run(args):
    return main(args)


# ---------------------------------------------------------------------------
# Happy paths


def test_solve_writes_field_and_heatmap(tmp_path, tiny_cfg, capsys):
    out = tmp_path / "out"
    assert run(["solve", "--config", tiny_cfg, "--out", str(out)]) == EXIT_OK
    assert (out / "field.csv").exists()
    ppm = (out / "field.ppm").read_bytes()
    assert ppm.startswith(b"P6\n11 30\n255\n")  # 11 time levels x 30 cells
    assert "solve: godunov" in capsys.readouterr().out


def test_reference_matches_shape(tmp_path, tiny_cfg):
    out = tmp_path / "ref"
    assert run(["reference", "--config", tiny_cfg, "--out", str(out)]) == EXIT_OK
    rows = (out / "reference.csv").read_text().strip().splitlines()
    assert len(rows) == 11
    assert len(rows[0].split(",")) == 30


def test_eval_and_winrate_reports(tmp_path, tiny_cfg):
    out = tmp_path / "ev"
    assert run(["eval", "--config", tiny_cfg, "--out", str(out)]) == EXIT_OK
    report = (out / "report.csv").read_text()
    assert "godunov" in report and "lax_friedrichs" in report
    out2 = tmp_path / "wr"
    assert run(["winrate", "--config", tiny_cfg, "--out", str(out2)]) == EXIT_OK
    head = (out2 / "winrate.csv").read_text().splitlines()[0]
    assert head == "scheme,godunov,lax_friedrichs"


def test_converge_writes_slope(tmp_path, tiny_cfg):
    out = tmp_path / "cv"
    assert run(["converge", "--config", tiny_cfg, "--out", str(out)]) == EXIT_OK
    text = (out / "convergence.csv").read_text()
    assert text.startswith("#slope=")
    assert len(text.splitlines()) == 4  # slope, header, two dt rows


def test_train_saves_checkpoint_and_log(tmp_path, tiny_cfg):
    out = tmp_path / "tr"
    assert run(["train", "--config", tiny_cfg, "--out", str(out)]) == EXIT_OK
    assert (out / "nfv_3_1.nfvw").exists()
    manifest = (out / "nfv_3_1.nfvw.manifest.txt").read_text()
    assert "objective=supervised" in manifest
    log = (out / "training_log.csv").read_text().splitlines()
    assert log[0] == "epoch,horizon,lr,loss"
    assert len(log) == 3  # two epochs


def test_solve_accepts_checkpoint_scheme(tmp_path, tiny_cfg):
    arch = NfvArchitecture(a=3, b=1)
    ckpt = tmp_path / "net.nfvw"
    save_checkpoint(ckpt, arch, init_params(arch, seed=0), {})
    out = tmp_path / "nn"
    code = run(["solve", "--config", tiny_cfg, "--scheme", f"nfv:{ckpt}",
                "--out", str(out)])
    assert code == EXIT_OK
    assert (out / "field.csv").exists()


def test_solve_lf_variant_spec(tmp_path, tiny_cfg):
    out = tmp_path / "lf"
    code = run(["solve", "--config", tiny_cfg,
                "--scheme", "lax_friedrichs:paper_literal", "--out", str(out)])
    assert code == EXIT_OK


def test_synth_ingest_calibrate_chain(tmp_path, tiny_cfg):
    out = tmp_path / "chain"
    assert run(["synth", "--config", tiny_cfg, "--scenario", "free_flow",
                "--out", str(out)]) == EXIT_OK
    trips = out / "trajectories.jsonl"
    assert trips.exists() and trips.stat().st_size > 0
    assert run(["ingest", "--input", str(trips), "--out", str(out)]) == EXIT_OK
    dens = out / "density.csv"
    rows = dens.read_text().strip().splitlines()
    assert len(rows) == 60 and len(rows[0].split(",")) == 25
    cal_cfg = tmp_path / "cal.ini"
    cal_cfg.write_text("[calibrate]\nstarts = 2\nmax_evals = 60\nhorizon = 5\n",
                       encoding="ascii")
    assert run(["calibrate", "--config", str(cal_cfg), "--input", str(dens),
                "--out", str(out)]) == EXIT_OK
    assert (out / "calibration.txt").read_text().startswith("family: greenshields")


def test_flux_override_beats_config(tmp_path, tiny_cfg, capsys):
    out = tmp_path / "bg"
    cfg = tmp_path / "b.ini"
    cfg.write_text(TINY.replace("breakpoints = 0.15\nvalues = 0.8 0.2",
                                "breakpoints = 0.15\nvalues = 1.0 -0.5"),
                   encoding="ascii")
    code = run(["solve", "--config", str(cfg), "--flux", "burgers",
                "--out", str(out)])
    assert code == EXIT_OK
    assert "on burgers" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# Exit codes


def test_missing_config_file_is_io_error(capsys):
    assert run(["solve", "--config", "/nonexistent/nope.ini"]) == EXIT_IO
    assert "cannot read config" in capsys.readouterr().err


def test_malformed_config_is_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[run\nflux = what", encoding="ascii")
    assert run(["solve", "--config", str(bad)]) == EXIT_CONFIG
    assert "bad config" in capsys.readouterr().err


def test_unknown_flux_is_config_error(tmp_path, tiny_cfg, capsys):
    code = run(["solve", "--config", tiny_cfg, "--flux", "quantum",
                "--out", str(tmp_path / "x")])
    assert code == EXIT_CONFIG


def test_unknown_scheme_and_missing_checkpoint(tmp_path, tiny_cfg):
    assert run(["solve", "--config", tiny_cfg, "--scheme", "psychic",
                "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert run(["solve", "--config", tiny_cfg, "--scheme", "nfv:",
                "--out", str(tmp_path / "y")]) == EXIT_CONFIG
    assert run(["solve", "--config", tiny_cfg,
                "--scheme", f"nfv:{tmp_path}/ghost.nfvw",
                "--out", str(tmp_path / "z")]) == EXIT_IO


def test_ingest_requires_input(tiny_cfg):
    assert run(["ingest", "--config", tiny_cfg]) == EXIT_CONFIG
    assert run(["calibrate", "--config", tiny_cfg]) == EXIT_CONFIG


def test_solve_without_ic_section(tmp_path):
    cfg = tmp_path / "noic.ini"
    cfg.write_text("[grid]\ncells = 10\nsteps = 2\n", encoding="ascii")
    assert run(["solve", "--config", str(cfg),
                "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_instability_exit_code(tmp_path, tiny_cfg, monkeypatch, capsys):
    def explode(*args, **kwargs):
        raise InstabilityError("synthetic blow-up", step=0)

    monkeypatch.setattr(fvlab.schemes, "rollout", explode)
    code = run(["solve", "--config", tiny_cfg, "--out", str(tmp_path / "x")])
    assert code == EXIT_UNSTABLE
    assert "numerical instability" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# Determinism (same seed, same bytes)


def _tree_bytes(root):
    return {p.name: p.read_bytes() for p in sorted(root.iterdir())}


@pytest.mark.parametrize("command", ["solve", "reference", "eval", "winrate",
                                     "converge", "train"])
def test_repeat_runs_are_byte_identical(tmp_path, tiny_cfg, command):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run([command, "--config", tiny_cfg, "--out", str(a)]) == EXIT_OK
    assert run([command, "--config", tiny_cfg, "--out", str(b)]) == EXIT_OK
    ta, tb = _tree_bytes(a), _tree_bytes(b)
    assert ta.keys() == tb.keys()
    for name in ta:
        assert ta[name] == tb[name], f"{command}/{name} differs between runs"


def test_synth_and_ingest_byte_identical(tmp_path, tiny_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["synth", "--config", tiny_cfg, "--scenario",
                    "stationary_jam", "--out", str(out)]) == EXIT_OK
        assert run(["ingest", "--input", str(out / "trajectories.jsonl"),
                    "--out", str(out)]) == EXIT_OK
    ta, tb = _tree_bytes(a), _tree_bytes(b)
    assert ta.keys() == tb.keys()
    for name in ta:
        assert ta[name] == tb[name]
