import numpy as np
import pytest
from hypothesis import given, strategies as st

from lapkernel.tensor_core import (Padding, as_image, check_filter_size, patch_trace, patch_trace_all,
                                   resolve_index, trace4)
from oracles import naive_patch_trace


def test_resolve_index_examples():
    assert resolve_index(0, 4, Padding.CIRCULAR) == (True, 4)
    assert resolve_index(0, 4, Padding.ZERO)[0] is False
    assert resolve_index(5, 4, "circular") == (True, 1)
    assert resolve_index(3, 4, Padding.ZERO) == (True, 3)


@given(st.integers(-50, 50), st.integers(1, 9))
def test_resolve_index_circular_in_range(i, n):
    ok, k = resolve_index(i, n, Padding.CIRCULAR)
    assert ok and 1 <= k <= n and (k - i) % n == 0


def test_trace4_examples():
    T = np.zeros((2, 2, 2, 2))
    for i in range(2):
        for j in range(2):
            T[i, j, i, j] = 1
    assert trace4(T) == 4
    assert trace4(np.zeros((3, 3, 3, 3))) == 0
    R = np.random.default_rng(0).standard_normal((3, 3, 3, 3))
    assert trace4(R) == pytest.approx(sum(R[i, j, i, j] for i in range(3) for j in range(3)), abs=1e-14)


def test_patch_trace_q1_is_entry():
    T = np.random.default_rng(1).standard_normal((3, 4, 3, 4))
    for scheme in Padding:
        assert patch_trace(T, 2, 3, 1, 4, 1, scheme) == T[1, 2, 0, 3]


def test_patch_trace_all_ones():
    # shared offsets: one filter tap covers both positions
    T = np.ones((5, 5, 5, 5))
    assert patch_trace(T, 3, 3, 2, 4, 3, Padding.CIRCULAR) == 9
    assert patch_trace(T, 1, 1, 1, 1, 3, Padding.ZERO) == 4


def test_even_filter_rejected():
    with pytest.raises(ValueError):
        check_filter_size(2)
    with pytest.raises(ValueError):
        patch_trace(np.ones((3, 3, 3, 3)), 1, 1, 1, 1, 4, Padding.ZERO)


def test_as_image_rejects_nan():
    with pytest.raises(ValueError):
        as_image(np.full((2, 2, 1), np.nan))


@pytest.mark.parametrize("shape,q", [((4, 4), 3), ((3, 5), 3), ((5, 5), 5), ((2, 3), 3)])
@pytest.mark.parametrize("scheme", list(Padding))
def test_patch_trace_all_matches_loops(shape, q, scheme):
    P, Q = shape
    T = np.random.default_rng(2).standard_normal((P, Q, P, Q))
    fast = patch_trace_all(T, q, scheme)
    circ = scheme is Padding.CIRCULAR
    for idx in np.ndindex(T.shape):
        assert fast[idx] == pytest.approx(naive_patch_trace(T, *idx, q, circ), abs=1e-12)
        assert fast[idx] == pytest.approx(patch_trace(T, *(k + 1 for k in idx), q, scheme), abs=1e-12)


def test_patch_trace_all_batched():
    T = np.random.default_rng(3).standard_normal((2, 3, 4, 3, 4))
    out = patch_trace_all(T, 3, Padding.ZERO)
    for b in range(2):
        np.testing.assert_array_equal(out[b], patch_trace_all(T[b], 3, Padding.ZERO))


@given(st.integers(0, 10 ** 6))
def test_zero_not_above_circular_for_nonnegative(seed):
    T = np.abs(np.random.default_rng(seed).standard_normal((3, 3, 3, 3)))
    assert np.all(patch_trace_all(T, 3, Padding.ZERO) <= patch_trace_all(T, 3, Padding.CIRCULAR) + 1e-12)
