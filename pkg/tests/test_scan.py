import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimhsi import autodiff as ad
from mimhsi.autodiff import Tensor
from mimhsi.scan import (
    DESIGNS,
    ScanMap,
    alt_scan_map,
    continuity_stats,
    gather_by_map,
    mcs_map,
    scan_map,
    scatter_by_map,
    split_center,
)

ODD_P = [1, 3, 5, 7, 9, 11, 13, 15]


def test_p1_any_design_and_type():
    for design in DESIGNS:
        for t in (1, 2, 3, 4):
            assert scan_map(1, design, t).order == ((0, 0),)


def test_mamba_type1_examples():
    m = mcs_map(5, 1)
    assert m.order[:3] == ((0, 0), (0, 1), (0, 2))
    assert m.order[-1] == (4, 4)
    assert mcs_map(3, 1).order == (
        (0, 0), (0, 1), (0, 2), (1, 2), (1, 1), (1, 0), (2, 0), (2, 1), (2, 2),
    )


def test_mamba_type_corners():
    # types 1/2 run between the two main-diagonal corners, 3/4 between the
    # anti-diagonal corners; odd types are row-wise, even ones column-wise
    for p in (3, 5, 9):
        t1, t2, t3, t4 = (mcs_map(p, t) for t in (1, 2, 3, 4))
        assert t1.order[0] == (0, 0) and t1.order[-1] == (p - 1, p - 1)
        assert t2.order[0] == (0, 0) and t2.order[-1] == (p - 1, p - 1)
        assert t3.order[0] == (0, p - 1) and t3.order[-1] == (p - 1, 0)
        assert t4.order[0] == (0, p - 1) and t4.order[-1] == (p - 1, 0)
        assert t1.order[1] == (0, 1) and t2.order[1] == (1, 0)
        assert t3.order[1] == (0, p - 2) and t4.order[1] == (1, p - 1)


def test_mamba_dihedral_relations():
    for p in (3, 5, 7):
        t1, t2, t3, t4 = (mcs_map(p, t) for t in (1, 2, 3, 4))
        assert t2.order == tuple((c, r) for r, c in t1.order)
        assert t3.order == tuple((r, p - 1 - c) for r, c in t1.order)
        assert t4.order == tuple((r, p - 1 - c) for r, c in t2.order)
        # each type reversed equals its own 180-degree rotation
        for t in (t1, t2, t3, t4):
            rot = tuple((p - 1 - r, p - 1 - c) for r, c in t.order)
            assert rot == tuple(reversed(t.order))


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(ODD_P), st.sampled_from(DESIGNS), st.sampled_from([1, 2, 3, 4]))
def test_bijectivity(p, design, type_id):
    m = scan_map(p, design, type_id)
    assert sorted(m.order) == [(r, c) for r in range(p) for c in range(p)]


def test_mamba_continuity_and_center_for_all_p():
    for p in ODD_P:
        for t in (1, 2, 3, 4):
            m = mcs_map(p, t)
            jumps, _ = continuity_stats(m)
            assert jumps == 0
            assert m.order[(p * p - 1) // 2] == ((p - 1) // 2, (p - 1) // 2)


def test_alt_scan_examples():
    assert scan_map(3, "raster", 1).order == (
        (0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2),
    )
    assert scan_map(3, "zigzag", 1).order == (
        (0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2), (1, 2), (2, 1), (2, 2),
    )


def test_continuity_stats_examples():
    assert continuity_stats(mcs_map(5, 1)) == (0, 1.0)
    assert continuity_stats(scan_map(5, "raster", 1))[0] == 4
    assert continuity_stats(scan_map(3, "diagonal", 1))[0] >= 1
    assert continuity_stats(scan_map(1, "mamba", 1)) == (0, 0.0)


def test_errors():
    with pytest.raises(ValueError):
        scan_map(4, "mamba", 1)
    with pytest.raises(ValueError):
        scan_map(-3, "mamba", 1)
    with pytest.raises(ValueError):
        scan_map(3, "hilbert", 1)
    with pytest.raises(ValueError):
        scan_map(3, "mamba", 5)
    with pytest.raises(ValueError):
        alt_scan_map(3, "mamba", 1)


# -- split ---------------------------------------------------------------------


def test_split_examples():
    s = split_center(mcs_map(5, 1))
    assert s.forward[0] == (0, 0) and s.backward[0] == (4, 4)
    assert len(s.forward) == len(s.backward) == 13
    assert s.forward[-1] == s.backward[-1] == (2, 2)

    s1 = split_center(mcs_map(1, 1))
    assert s1.forward == s1.backward == ((0, 0),)

    s3 = split_center(mcs_map(3, 1))
    assert s3.backward == ((2, 2), (2, 1), (2, 0), (1, 0), (1, 1))


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(ODD_P), st.sampled_from(DESIGNS), st.sampled_from([1, 2, 3, 4]))
def test_split_coverage_invariants(p, design, type_id):
    s = split_center(scan_map(p, design, type_id))
    assert len(s.forward) == len(s.backward) == (p * p + 1) // 2
    center = ((p - 1) // 2, (p - 1) // 2)
    assert s.forward[-1] == center and s.backward[-1] == center
    assert set(s.forward) | set(s.backward) == {(r, c) for r in range(p) for c in range(p)}
    assert set(s.forward) & set(s.backward) == {center}


def test_split_rejects_noncentered_map():
    base = mcs_map(3, 1)
    shifted = ScanMap(p=3, design="mamba", type_id=1, order=base.order[1:] + base.order[:1])
    with pytest.raises(ValueError):
        split_center(shifted)


# -- gather / scatter -------------------------------------------------------------


def test_gather_raster_is_row_major_flatten():
    rng = np.random.default_rng(0)
    patch = rng.normal(size=(2, 3, 3, 4))
    seq = gather_by_map(Tensor(patch), scan_map(3, "raster", 1))
    np.testing.assert_array_equal(seq.data, patch.reshape(2, 9, 4))


def test_gather_scatter_round_trip():
    rng = np.random.default_rng(1)
    patch = rng.normal(size=(2, 5, 5, 3))
    for design in DESIGNS:
        for t in (1, 2, 3, 4):
            m = scan_map(5, design, t)
            back = scatter_by_map(gather_by_map(Tensor(patch), m), m)
            np.testing.assert_array_equal(back.data, patch)


def test_gather_gradient_is_inverse_scatter():
    rng = np.random.default_rng(2)
    patch = Tensor(rng.normal(size=(1, 3, 3, 2)), requires_grad=True)
    seq = gather_by_map(patch, mcs_map(3, 2))
    (g,) = ad.grad(ad.sum_(seq), [patch])
    np.testing.assert_array_equal(g.data, np.ones((1, 3, 3, 2)))


def test_gather_split_returns_both_halves():
    rng = np.random.default_rng(3)
    patch = rng.normal(size=(1, 3, 3, 2))
    m = mcs_map(3, 1)
    s = split_center(m)
    fwd, bwd = gather_by_map(Tensor(patch), s)
    full = gather_by_map(Tensor(patch), m)
    np.testing.assert_array_equal(fwd.data, full.data[:, :5])
    np.testing.assert_array_equal(bwd.data, full.data[:, 4:][:, ::-1])


def test_gather_shape_mismatch():
    with pytest.raises(ValueError):
        gather_by_map(Tensor(np.ones((1, 4, 4, 2))), mcs_map(3, 1))
