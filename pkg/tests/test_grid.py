"""Mesh, fields, projection, error metrics, and serialization round-trips.

Metric oracles are hand-evaluated on 2x2 fields arranged so the included
region (row 0 and the edge columns are masked out on larger fields) is the
whole array: single-row-after-masking cases use explicit tiny fields where
the mask degenerates to the identity.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fvlab.grid import (
    BoundarySpec,
    ConfigError,
    Field,
    GHOST_EXTRAPOLATE,
    Grid1D,
    PRESCRIBED_TRACES,
    l1_error,
    l2_error,
    project_fine_to_coarse,
    read_field,
    read_field_csv,
    rel_error,
    write_field,
    write_field_csv,
    write_field_meta,
)


def small_field(values):
    values = np.asarray(values, dtype=float)
    grid = Grid1D(
        dx=0.1, dt=0.05, n_cells=values.shape[1], n_steps=values.shape[0] - 1
    )
    return Field(grid, values)


# ---------------------------------------------------------------------------
# Grid1D geometry


def test_grid_geometry():
    g = Grid1D(dx=0.25, dt=0.1, n_cells=4, n_steps=3, x0=-0.5)
    assert g.length == pytest.approx(1.0)
    assert g.x_end == pytest.approx(0.5)
    np.testing.assert_allclose(g.interfaces(), [-0.5, -0.25, 0.0, 0.25, 0.5])
    np.testing.assert_allclose(g.centers(), [-0.375, -0.125, 0.125, 0.375])
    np.testing.assert_allclose(g.times(), [0.0, 0.1, 0.2, 0.3])


@pytest.mark.parametrize("bad", [dict(dx=0.0), dict(dt=-1.0), dict(n_cells=0)])
def test_grid_rejects_degenerate(bad):
    kwargs = dict(dx=0.1, dt=0.1, n_cells=10, n_steps=5)
    kwargs.update(bad)
    with pytest.raises(ConfigError):
        Grid1D(**kwargs)


def test_field_shape_checked():
    g = Grid1D(dx=0.1, dt=0.1, n_cells=3, n_steps=1)
    with pytest.raises(ConfigError):
        Field(g, np.zeros((3, 3)))
    with pytest.raises(ConfigError):
        Field(g, np.array([[0.0, 1.0, np.nan], [0.0, 0.0, 0.0]]))


def test_field_mass():
    fld = small_field([[1.0, 2.0, 3.0], [0.0, 0.0, 6.0]])
    assert fld.mass(0) == pytest.approx(0.6)
    assert fld.mass(1) == pytest.approx(0.6)


# ---------------------------------------------------------------------------
# boundary specs


def test_boundary_default_is_ghost():
    assert BoundarySpec().kind == GHOST_EXTRAPOLATE


def test_prescribed_traces_need_both_sides():
    with pytest.raises(ConfigError):
        BoundarySpec(kind=PRESCRIBED_TRACES, left_trace=[1.0, 2.0])


def test_prescribed_traces_length_check():
    bc = BoundarySpec(
        kind=PRESCRIBED_TRACES, left_trace=[0.1, 0.2], right_trace=[0.3, 0.4]
    )
    bc.check_length(2)
    with pytest.raises(ConfigError):
        bc.check_length(3)


# ---------------------------------------------------------------------------
# projection


def test_projection_identity_when_ratios_one():
    fld = small_field([[1.0, 2.0], [3.0, 4.0]])
    out = project_fine_to_coarse(fld, fld.grid)
    np.testing.assert_array_equal(out.values, fld.values)


def test_projection_constant_stays_constant():
    fine = Field(
        Grid1D(dx=0.05, dt=0.025, n_cells=8, n_steps=4), np.full((5, 8), 0.7)
    )
    coarse = Grid1D(dx=0.1, dt=0.05, n_cells=4, n_steps=2)
    out = project_fine_to_coarse(fine, coarse)
    np.testing.assert_allclose(out.values, 0.7)


def test_projection_block_mean_and_time_sampling():
    fine = Field(
        Grid1D(dx=0.05, dt=0.05, n_cells=2, n_steps=2),
        np.array([[1.0, 3.0], [5.0, 7.0], [2.0, 4.0]]),
    )
    coarse = Grid1D(dx=0.1, dt=0.1, n_cells=1, n_steps=1)
    out = project_fine_to_coarse(fine, coarse)
    # spatial mean of [1,3] is 2; time samples rows 0 and 2 (pointwise)
    np.testing.assert_allclose(out.values, [[2.0], [3.0]])


def test_projection_rejects_non_integer_ratio():
    fine = Field(Grid1D(dx=0.03, dt=0.05, n_cells=10, n_steps=1), np.zeros((2, 10)))
    with pytest.raises(ConfigError):
        project_fine_to_coarse(fine, Grid1D(dx=0.1, dt=0.05, n_cells=3, n_steps=1))


def test_projection_preserves_mass():
    rng = np.random.default_rng(3)
    fine = Field(
        Grid1D(dx=0.01, dt=0.02, n_cells=60, n_steps=6), rng.uniform(0, 1, (7, 60))
    )
    coarse = Grid1D(dx=0.03, dt=0.06, n_cells=20, n_steps=2)
    out = project_fine_to_coarse(fine, coarse)
    for n_coarse, n_fine in [(0, 0), (1, 3), (2, 6)]:
        mass_c = out.values[n_coarse].sum() * coarse.dx
        mass_f = fine.values[n_fine].sum() * fine.grid.dx
        assert mass_c == pytest.approx(mass_f, rel=1e-12)


# ---------------------------------------------------------------------------
# error metrics: hand-computed oracles


def test_metrics_zero_on_identical_fields():
    fld = small_field(np.arange(8.0).reshape(2, 4))
    assert l1_error(fld, fld) == 0.0
    assert l2_error(fld, fld) == 0.0
    assert rel_error(fld, fld) == 0.0


def test_metrics_hand_values_two_cells():
    # 1x2 field: mask degenerates to the full array.
    a = small_field([[0.0, 1.0]])
    b = small_field([[0.5, 0.5]])
    assert l1_error(a, b) == pytest.approx(0.5)
    assert l2_error(a, b) == pytest.approx(0.25)
    # rel with eps=0.1: |0-.5|/max(.1,0) + |1-.5|/max(.1,1) over 2 = (5+0.5)/2
    assert rel_error(a, b, eps=0.1) == pytest.approx(2.75)


def test_metrics_hand_values_unit_errors():
    a = small_field([[1.0, 1.0]])
    b = small_field([[0.0, 2.0]])
    assert l1_error(a, b) == pytest.approx(1.0)
    assert l2_error(a, b) == pytest.approx(1.0)


def test_l2_is_mean_square_not_root():
    a = small_field([[2.0, 2.0]])
    b = small_field([[0.0, 0.0]])
    assert l2_error(a, b) == pytest.approx(4.0)


def test_metrics_exclude_initial_row_and_edge_columns():
    # only the (row 1, col 1) entry is included in a 2x3 field
    a = small_field([[9.0, 9.0, 9.0], [5.0, 1.0, 7.0]])
    b = small_field([[0.0, 0.0, 0.0], [0.0, 3.0, 0.0]])
    assert l1_error(a, b) == pytest.approx(2.0)
    assert l2_error(a, b) == pytest.approx(4.0)


def test_metrics_reject_shape_mismatch():
    a = small_field([[1.0, 2.0]])
    b = small_field([[1.0, 2.0], [3.0, 4.0]])
    with pytest.raises(ConfigError):
        l1_error(a, b)


@given(
    st.integers(2, 5),
    st.integers(3, 7),
    st.integers(0, 2**32 - 1),
)
@settings(max_examples=30, deadline=None)
def test_metrics_nonnegative_and_zero_iff_included_equal(rows, cols, seed):
    rng = np.random.default_rng(seed)
    av = rng.uniform(-1, 1, (rows, cols))
    bv = av.copy()
    # perturb only masked entries: metrics must stay exactly zero
    bv[0, :] += 1.0
    bv[:, 0] -= 2.0
    bv[:, -1] += 3.0
    a, b = small_field(av), small_field(bv)
    assert l1_error(a, b) == 0.0
    bv2 = av.copy()
    bv2[1, 1] += 0.5
    assert l1_error(a, small_field(bv2)) > 0.0
    assert l2_error(a, small_field(bv2)) > 0.0


# ---------------------------------------------------------------------------
# serialization round-trips


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    fld = small_field(rng.uniform(-1, 1, (3, 4)))
    path = tmp_path / "field.csv"
    write_field_csv(fld, path)
    back = read_field_csv(path, fld.grid)
    np.testing.assert_array_equal(back.values, fld.values)


def test_binary_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    grid = Grid1D(dx=0.2, dt=0.05, n_cells=5, n_steps=2, x0=-1.0)
    fld = Field(grid, rng.uniform(0, 1, (3, 5)))
    path = tmp_path / "field.nfv"
    write_field(fld, path)
    back = read_field(path)
    np.testing.assert_array_equal(back.values, fld.values)
    assert back.grid.dx == grid.dx
    assert back.grid.dt == grid.dt
    assert back.grid.x0 == grid.x0


def test_binary_magic_checked(tmp_path):
    path = tmp_path / "bogus.nfv"
    path.write_bytes(b"XXXX" + b"\0" * 40)
    with pytest.raises(ConfigError):
        read_field(path)


def test_meta_sidecar_is_sorted_and_deterministic(tmp_path):
    path = tmp_path / "meta.txt"
    write_field_meta(path, {"b": 2, "a": "x", "c": 1.5})
    assert path.read_text() == "a=x\nb=2\nc=1.5\n"
