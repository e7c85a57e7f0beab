import itertools

import numpy as np
import pytest

from lapkernel.augmentation import (GroupElement, augmented_kernel, build_augmented_dataset,
                                    check_equivariance, flip_group, flip_translation_group, hflip,
                                    translate, translation_group, trivial_group)
from lapkernel.dp import Family, KernelConfig, compute_pair
from lapkernel.readout import readout_fc, readout_gap
from lapkernel.tensor_core import Padding
from oracles import images

X = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]


def test_translate_examples():
    np.testing.assert_array_equal(translate(X, 1, 0, Padding.CIRCULAR)[..., 0], [[3, 4], [1, 2]])
    np.testing.assert_array_equal(translate(X, 0, 0), X)
    np.testing.assert_array_equal(translate(translate(X, 1, 0), -1, 0), X)
    np.testing.assert_array_equal(translate(X, 1, 0, Padding.ZERO)[..., 0], [[3, 4], [0, 0]])


def test_hflip_examples():
    np.testing.assert_array_equal(hflip(X)[..., 0], [[3, 4], [1, 2]])
    x = images(0, 1, (3, 4, 2))[0]
    np.testing.assert_array_equal(hflip(hflip(x)), x)
    sym = np.array([[1.0, 2.0], [5.0, 6.0], [1.0, 2.0]])[..., None]
    np.testing.assert_array_equal(hflip(sym), sym)


def _same_action(g, h, x):
    return np.array_equal(g(x), h(x))


@pytest.mark.parametrize("make", [translation_group, flip_translation_group])
def test_group_axioms(make):
    G = make(3, 3)
    x = images(1, 1, (3, 3, 1))[0]
    e = GroupElement.identity(3, 3)
    for g in G:
        assert (g @ e) == g == (e @ g)
        assert (g @ g.inverse()) == e
        assert _same_action(g.inverse(), g.inverse(), g(x)) and np.array_equal(g.inverse()(g(x)), x)
    for g, h in itertools.product(G, G):
        assert (g @ h) in G
        assert np.array_equal((g @ h)(x), g(h(x)))
    for g, h, k in itertools.product(G[::3], G[::2], G[::4]):
        assert (g @ h) @ k == g @ (h @ k)


def test_flip_translation_relation():
    # F after T_{a,b} acts like T_{-a,b} after F
    x = images(2, 1, (4, 3, 2))[0]
    F = GroupElement(4, 3, 0, 0, True)
    for a, b in itertools.product(range(4), range(3)):
        T = GroupElement(4, 3, a, b)
        assert np.array_equal(F(T(x)), GroupElement(4, 3, -a, b)(F(x)))
        assert F @ T == GroupElement(4, 3, -a, b) @ F


def test_zero_padding_groups_rejected():
    with pytest.raises(ValueError):
        translation_group(3, 3, Padding.ZERO)
    with pytest.raises(ValueError):
        flip_translation_group(3, 3, "zero")


def test_augmented_kernel_examples():
    x, y = images(3, 2, (4, 4, 2))
    cfg = KernelConfig(depth=2, padding=Padding.CIRCULAR, family=Family.CNNGP)
    fc = lambda a, b: readout_fc(compute_pair(a, b, cfg))
    gap = lambda a, b: readout_gap(compute_pair(a, b, cfg))
    assert augmented_kernel(fc, trivial_group(4, 4))(x, y) == fc(x, y)
    assert augmented_kernel(fc, translation_group(4, 4))(x, y) == pytest.approx(16 * gap(x, y), rel=1e-10)
    assert augmented_kernel(gap, flip_group(4, 4))(x, y) == pytest.approx(0.5 * (gap(x, y) + gap(hflip(x), y)))
    with pytest.raises(ValueError):
        augmented_kernel(fc, [])


def test_equivariance_reports():
    circ = KernelConfig(depth=2, padding=Padding.CIRCULAR)
    zero = KernelConfig(depth=2, padding=Padding.ZERO)
    G = translation_group(4, 4)
    assert check_equivariance(lambda a, b: readout_fc(compute_pair(a, b, circ)), G, tol=1e-10).passed
    report = check_equivariance(lambda a, b: readout_fc(compute_pair(a, b, zero)), G, tol=1e-10)
    assert not report.passed and report.max_violation > 1e-3
    for cfg in (circ, zero):
        assert check_equivariance(lambda a, b: readout_gap(compute_pair(a, b, cfg)), flip_group(4, 4),
                                  tol=1e-10, channels=2).passed


def test_augmented_kernel_is_equivariant():
    cfg = KernelConfig(depth=1, padding=Padding.CIRCULAR)
    G = translation_group(3, 3)
    KG = augmented_kernel(lambda a, b: readout_fc(compute_pair(a, b, cfg)), G)
    assert check_equivariance(KG, G, trials=1, tol=1e-10).passed


def test_augmented_dataset_shapes_and_order():
    xs = images(4, 3, (2, 2, 1))
    d = build_augmented_dataset(xs[:1], [0], trivial_group(2, 2))
    assert len(d) == 1 and np.array_equal(d.images[0], xs[0])
    assert len(build_augmented_dataset(xs[:2], [0, 1], translation_group(2, 2))) == 8
    f = build_augmented_dataset(xs, [0, 1, 2], flip_group(2, 2))
    assert len(f) == 6
    np.testing.assert_array_equal(f.images[:3], xs)
    np.testing.assert_array_equal(f.labels, [0, 1, 2, 0, 1, 2])
