import numpy as np
import pytest
from hypothesis import given, strategies as st

from lapkernel.dp import KernelConfig, compute_pair
from lapkernel.readout import (Readout, ReadoutSet, apply_readout, axis_multiplicity, lap_weights,
                               readout_fc, readout_gap, readout_lap)
from lapkernel.tensor_core import Padding
from oracles import images, naive_fc, naive_gap, naive_lap


def test_fc_and_gap_examples():
    T = np.zeros((2, 2, 2, 2))
    for i in range(2):
        for j in range(2):
            T[i, j, i, j] = 1
    assert readout_fc(T) == 4
    assert readout_gap(np.ones((2, 2, 2, 2))) == 1
    assert readout_gap(np.zeros((2, 2, 2, 2))) == 0


def test_fc_gap_match_loops():
    T = np.random.default_rng(0).standard_normal((3, 4, 3, 4))
    assert readout_fc(T) == pytest.approx(naive_fc(T), abs=1e-12)
    assert readout_gap(T) == pytest.approx(naive_gap(T), abs=1e-14)


def test_small_lap_weights():
    w = lap_weights(2, 2, 1, Padding.ZERO)
    assert np.all(w.u_row == 2) and np.all(w.u_col == 2)
    np.testing.assert_allclose(w.full(), 4 / 81)


def test_uniform_weights_at_full_radius():
    w = lap_weights(4, 4, 4, Padding.ZERO)
    assert np.all(w.u_row == 4)


@pytest.mark.parametrize("padding", list(Padding))
def test_c0_is_identity(padding):
    w = lap_weights(3, 5, 0, padding)
    np.testing.assert_array_equal(w.u_row, np.eye(3))
    np.testing.assert_array_equal(w.u_col, np.eye(5))
    T = np.random.default_rng(1).standard_normal((3, 5, 3, 5))
    assert readout_lap(T, w) == readout_fc(T)


@pytest.mark.parametrize("c", [1, 2])
@pytest.mark.parametrize("padding", list(Padding))
def test_lap_matches_offset_loops(c, padding):
    T = np.random.default_rng(c).standard_normal((4, 3, 4, 3))
    fast = readout_lap(T, lap_weights(4, 3, c, padding))
    assert fast == pytest.approx(naive_lap(T, c, padding is Padding.CIRCULAR), abs=1e-12)


@given(st.integers(1, 7), st.integers(0, 5), st.sampled_from(list(Padding)))
def test_multiplicity_properties(n, c, padding):
    u = axis_multiplicity(n, c, padding)
    assert u.dtype.kind == "i" and np.all(u >= 0)
    np.testing.assert_array_equal(u, u.T)
    # every position sees (2c+1)^2 offset pairs in total under circular padding
    if padding is Padding.CIRCULAR:
        assert np.all(u.sum(axis=1) == (2 * c + 1) ** 2)
    else:
        i, ip = np.indices((n, n))
        assert np.all(u[np.abs(i - ip) > 2 * c] == 0)


def test_normalised_full_radius_equals_gap():
    x, y = images(2, 2, (4, 4, 2))
    cfg = KernelConfig(depth=2)
    Txy, Txx, Tyy = (compute_pair(a, b, cfg) for a, b in ((x, y), (x, x), (y, y)))
    w = lap_weights(4, 4, 3, Padding.ZERO)
    lap = readout_lap(Txy, w) / np.sqrt(readout_lap(Txx, w) * readout_lap(Tyy, w))
    gap = readout_gap(Txy) / np.sqrt(readout_gap(Txx) * readout_gap(Tyy))
    assert lap == pytest.approx(gap, abs=1e-12)


def test_gap_is_mean_of_shifted_traces():
    # circular padding: the GAP sum equals the average over all offsets of shifted traces
    T = np.random.default_rng(3).standard_normal((3, 3, 3, 3))
    assert readout_gap(T) * 9 == pytest.approx(naive_lap(T, 1, True), abs=1e-12)


def test_self_values_nonnegative():
    x = images(4, 1, (4, 4, 2))[0]
    T = compute_pair(x, x, KernelConfig(depth=3))
    for r in (Readout.fc(), Readout.gap(), Readout.lap(1)):
        assert apply_readout(T, r) >= 0


def test_readout_parse_and_set():
    assert Readout.parse("lap:4") == Readout.lap(4)
    assert str(Readout.parse("GAP")) == "gap"
    with pytest.raises(ValueError):
        Readout.parse("max")
    with pytest.raises(ValueError):
        lap_weights(3, 3, -1)
    T = np.random.default_rng(5).standard_normal((2, 4, 4, 4, 4))
    rs = ReadoutSet([Readout.fc(), Readout.gap(), Readout.lap(2)], 4, 4)
    vals = rs.apply(T)
    assert vals.shape == (3, 2)
    assert vals[2, 1] == pytest.approx(readout_lap(T[1], lap_weights(4, 4, 2)), rel=1e-13)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        readout_lap(np.zeros((3, 3, 3, 3)), lap_weights(4, 4, 1))
