import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lapkernel.arccos import Cov2, expect_relu_deriv_prod, expect_relu_prod, relu_expectations


def test_product_examples():
    assert expect_relu_prod(Cov2(1, 1, 1)) == pytest.approx(0.5, abs=1e-15)
    assert expect_relu_prod(Cov2(1, 1, 0)) == pytest.approx(1 / (2 * math.pi), abs=1e-15)
    assert expect_relu_prod(Cov2(0, 5, 0)) == 0


def test_derivative_examples():
    assert expect_relu_deriv_prod(a=1, d=1, b=1) == pytest.approx(0.5, abs=1e-15)
    assert expect_relu_deriv_prod(a=1, d=1, b=0) == pytest.approx(0.25, abs=1e-15)
    assert expect_relu_deriv_prod(a=1, d=1, b=-1) == 0


@pytest.mark.parametrize("bad", [(np.nan, 1, 0), (-1, 1, 0), (1, 1, 2)])
def test_invalid_covariance(bad):
    with pytest.raises(ValueError):
        Cov2(*bad)


def test_roundoff_above_psd_is_clamped():
    # |b| just beyond sqrt(ad) by roundoff is accepted and treated as rho = 1
    assert expect_relu_prod(a=2.0, d=2.0, b=2.0 * (1 + 1e-13)) == pytest.approx(1.0, abs=1e-12)


def test_monotone_in_rho():
    rho = np.linspace(-1, 1, 100)
    k, kd = relu_expectations(np.ones(100), np.ones(100), rho)
    assert np.all(np.diff(k) >= 0) and np.all(np.diff(kd) >= 0)


@st.composite
def psd(draw):
    a = draw(st.floats(0, 10))
    d = draw(st.floats(0, 10))
    r = draw(st.floats(-1, 1))
    return a, d, r * math.sqrt(a * d)


@given(psd())
def test_bounds_and_symmetry(cov):
    a, d, b = cov
    k, kd = expect_relu_prod(a=a, d=d, b=b), expect_relu_deriv_prod(a=a, d=d, b=b)
    assert 0 <= kd <= 0.5
    assert -1e-15 <= k <= math.sqrt(a * d) / 2 + 1e-12
    assert k == expect_relu_prod(a=d, d=a, b=b)
    assert kd == expect_relu_deriv_prod(a=d, d=a, b=b)


def test_monte_carlo_agreement():
    rng = np.random.default_rng(0)
    n = 200_000
    worst = 0.0
    for _ in range(50):
        L = rng.standard_normal((2, 2))
        S = L @ L.T
        z = rng.standard_normal((n, 2)) @ L.T
        u, v = np.maximum(z, 0).T
        samples = u * v
        se = samples.std() / math.sqrt(n)
        k = expect_relu_prod(a=S[0, 0], d=S[1, 1], b=S[0, 1])
        worst = max(worst, abs(samples.mean() - k) / se)
        steps = (z[:, 0] > 0) & (z[:, 1] > 0)
        kd = expect_relu_deriv_prod(a=S[0, 0], d=S[1, 1], b=S[0, 1])
        worst = max(worst, abs(steps.mean() - kd) / (steps.std() / math.sqrt(n)))
    assert worst < 4.5
