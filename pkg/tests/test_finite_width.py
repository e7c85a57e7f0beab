import numpy as np
import pytest

from lapkernel.dp import Family, KernelConfig, compute_pair
from lapkernel.finite_width import (box_blur, cnn_forward, gradient_check, init_params, mc_cnngp, mc_cntk,
                                    verify_bblur_lap)
from lapkernel.readout import readout_fc, readout_gap
from lapkernel.tensor_core import Padding, trace4
from oracles import images


def test_zero_input_zero_output():
    cfg = KernelConfig(depth=2)
    params = init_params(np.random.default_rng(0), (4, 4, 2), cfg, 5)
    assert cnn_forward(params, np.zeros((4, 4, 2)), cfg) == 0


def test_bblur_c0_is_fc():
    cfg = KernelConfig(depth=2)
    rng = np.random.default_rng(1)
    params = init_params(rng, (4, 4, 2), cfg, 3, "bblur:0")
    x = rng.standard_normal((4, 4, 2))
    assert cnn_forward(params, x, cfg, "bblur:0") == pytest.approx(cnn_forward(params, x, cfg, "fc"), rel=1e-14)


def test_hand_computed_scalar_net():
    # 1x1 image, q=1, width 1, depth 1: f = head * sqrt(2) * relu(w x + gamma b)
    cfg = KernelConfig(depth=1, filter_size=1, bias=0.5)
    params = init_params(np.random.default_rng(2), (1, 1, 1), cfg, 1)
    w, b, v = params.weights[0].item(), params.biases[0].item(), params.head.item()
    x = 1.7
    expected = v * np.sqrt(2.0) * max(w * x + 0.5 * b, 0.0)
    assert cnn_forward(params, np.full((1, 1, 1), x), cfg) == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize("readout", ["fc", "gap", "bblur:1"])
@pytest.mark.parametrize("padding", list(Padding))
def test_gradients_match_finite_differences(readout, padding):
    cfg = KernelConfig(depth=2, padding=padding, bias=0.5)
    assert gradient_check(cfg, shape=(4, 4, 2), width=4, readout=readout) <= 1e-5


def test_mc_self_values_positive():
    x = images(3, 1, (4, 4, 1))[0]
    cfg = KernelConfig(depth=1)
    assert mc_cnngp(x, x, cfg, width=8, samples=50).estimate > 0
    assert mc_cntk(x, x, cfg, width=8, samples=20).estimate >= 0


def test_mc_seeded_determinism():
    x, y = images(4, 2, (3, 3, 1))
    cfg = KernelConfig(depth=1)
    a = mc_cnngp(x, y, cfg, width=8, samples=30, seed=5)
    b = mc_cnngp(x, y, cfg, width=8, samples=30, seed=5, threads=3)
    assert a == b


@pytest.mark.slow
@pytest.mark.parametrize("readout", ["gap", "bblur:1"])
def test_mc_cnngp_agrees(readout):
    x, y = images(5, 2, (6, 6, 2))
    cfg = KernelConfig(depth=2, family=Family.CNNGP)
    T = compute_pair(x, y, cfg)
    if readout == "gap":
        exact = readout_gap(T)
    else:
        exact = verify_bblur_lap(x, y, cfg, 1, tensor=T).lap_value
    est = mc_cnngp(x, y, cfg, readout, width=512, samples=600, seed=1)
    assert est.zscore(exact) <= 4


def test_width_convergence_trend():
    pairs = [images(s, 2, (4, 4, 1)) for s in range(10)]
    cfg = KernelConfig(depth=2, family=Family.CNNGP)
    errs = {}
    for width in (16, 512):
        e = []
        for x, y in pairs:
            exact = readout_fc(compute_pair(x, y, cfg))
            est = mc_cnngp(x, y, cfg, width=width, samples=20, seed=3, exact_head=True)
            e.append(abs(est.estimate - exact) / abs(exact))
        errs[width] = np.median(e)
    assert errs[512] < errs[16]


@pytest.mark.parametrize("c,padding", [(0, Padding.ZERO), (1, Padding.CIRCULAR), (2, Padding.ZERO), (2, Padding.CIRCULAR)])
def test_bblur_trace_equals_lap(c, padding):
    x, y = images(6, 2, (4, 4, 2))
    cfg = KernelConfig(depth=2, padding=padding)
    rep = verify_bblur_lap(x, y, cfg, c)
    assert rep.passed
    if c == 0:
        assert rep.lap_value == pytest.approx(trace4(compute_pair(x, y, cfg)), rel=1e-14)


def test_box_blur_is_local_mean():
    h = np.arange(25.0).reshape(1, 5, 5, 1)
    out = box_blur(h, 1, Padding.ZERO)
    assert out[0, 2, 2, 0] == pytest.approx(h[0, 1:4, 1:4, 0].mean())
    assert out[0, 0, 0, 0] == pytest.approx(h[0, :2, :2, 0].sum() / 9)
