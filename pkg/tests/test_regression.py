import numpy as np
import pytest
from hypothesis import given, strategies as st

from lapkernel.assembly import PairComputationError
from lapkernel.augmentation import flip_group, translation_group, trivial_group
from lapkernel.dp import Family, KernelConfig, compute_pair
from lapkernel.readout import readout_fc, readout_gap
from lapkernel.regression import (KernelMatrix, KernelSolveError, assemble_kernel_matrix,
                                  compare_augmented_paths, kernel_from_function, krr_fit, krr_predict,
                                  one_hot, read_kernel_matrix, verify_theorem1, write_kernel_matrix)
from lapkernel.tensor_core import Padding
from oracles import images


def test_assemble_single_and_duplicate():
    xs = images(0, 5, (4, 4, 2))
    assert assemble_kernel_matrix(xs[:1], [0], KernelConfig(depth=2)).values.tolist() == [[1.0]]
    xs[1] = xs[0]
    K = assemble_kernel_matrix(xs, [0, 1, 0, 1, 0], KernelConfig(depth=2), "lap:1")
    assert K.values[0, 1] == pytest.approx(1.0, abs=1e-15)
    assert np.all(K.values.diagonal() == 1.0)
    np.testing.assert_allclose(K.values, K.values.T, rtol=1e-12)
    assert np.linalg.eigvalsh(K.values).min() >= -1e-8


def test_assemble_matches_pairwise():
    xs = images(1, 4, (3, 3, 1))
    cfg = KernelConfig(depth=2, family=Family.CNNGP)
    K = assemble_kernel_matrix(xs, [0, 1, 0, 1], cfg, "gap")
    ref = kernel_from_function(lambda a, b: readout_gap(compute_pair(a, b, cfg)), xs, [0, 1, 0, 1])
    np.testing.assert_allclose(K.values, ref.values, atol=1e-14)


def test_assemble_reports_bad_pair():
    xs = images(2, 3, (3, 3, 1))
    xs[2, 0, 0, 0] = np.inf
    with pytest.raises((PairComputationError, ValueError)):
        assemble_kernel_matrix(xs, [0, 1, 0], KernelConfig(depth=1))


def test_assemble_empty():
    with pytest.raises(ValueError):
        assemble_kernel_matrix(np.zeros((0, 3, 3, 1)), [], KernelConfig(depth=1))


def test_krr_identity_examples():
    K = KernelMatrix(np.eye(2), [0, 1], 2)
    np.testing.assert_allclose(krr_fit(K, 0.0).alpha, np.eye(2))
    np.testing.assert_allclose(krr_fit(K, 0.5).alpha, np.eye(2) / 1.5)


def test_krr_residual_random_psd():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((30, 30))
    labels = rng.integers(0, 4, 30)
    model = krr_fit(KernelMatrix(A @ A.T / 30, labels, 4), 5e-5)
    assert model.residual <= 1e-8


def test_krr_singular_error():
    with pytest.raises(KernelSolveError, match="cond"):
        krr_fit(KernelMatrix(np.ones((3, 3)), [0, 1, 0], 2), 0.0)
    with pytest.raises(ValueError):
        krr_fit(np.eye(2), -1.0, labels=[0, 1], class_count=2)


def test_predict_examples():
    model = krr_fit(KernelMatrix(np.eye(3), [2, 0, 1], 3), 0.0)
    _, pred = krr_predict(model, np.eye(3)[1])
    assert pred.tolist() == [0]
    zero = krr_fit(KernelMatrix(np.eye(2), [0, 1], 2), 0.0)
    zero.alpha[:] = 0
    scores, pred = krr_predict(zero, np.ones((2, 2)))
    assert np.all(scores == 0) and pred.tolist() == [0, 0]
    with pytest.raises(ValueError):
        krr_predict(zero, np.ones((1, 3)))


def test_predict_matches_loops():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((6, 6))
    model = krr_fit(A @ A.T + np.eye(6), 0.1, labels=[0, 1, 2, 0, 1, 2], class_count=3)
    kc = rng.standard_normal((4, 6))
    scores, _ = krr_predict(model, kc)
    for t in range(4):
        for c in range(3):
            assert scores[t, c] == pytest.approx(sum(kc[t, i] * model.alpha[i, c] for i in range(6)), abs=1e-12)


def test_interpolation_train_equals_test():
    xs = images(5, 6, (3, 3, 2))
    labels = np.array([0, 1, 2, 0, 1, 2])
    K = assemble_kernel_matrix(xs, labels, KernelConfig(depth=2))
    _, pred = krr_predict(krr_fit(K, 0.0), K.values)
    assert np.array_equal(pred, labels)


@given(st.floats(0.1, 100))
def test_scale_invariance_of_labels(s):
    rng = np.random.default_rng(6)
    A = rng.standard_normal((8, 8))
    K = A @ A.T + 0.5 * np.eye(8)
    labels = rng.integers(0, 3, 8)
    kc = rng.standard_normal((5, 8))
    p1 = krr_predict(krr_fit(K, 1e-2, labels=labels, class_count=3), kc)[1]
    p2 = krr_predict(krr_fit(s * K, s * 1e-2, labels=labels, class_count=3), s * kc)[1]
    assert np.array_equal(p1, p2)


def test_ridge_consistency():
    rng = np.random.default_rng(7)
    A = rng.standard_normal((6, 6))
    K = A @ A.T + np.eye(6)
    Y = one_hot([0, 1, 0, 1, 0, 1], 2)
    kc = rng.standard_normal((3, 6))
    exact = kc @ krr_fit(K, 0.0, targets=Y).alpha
    diffs = [np.abs(kc @ krr_fit(K, lam, targets=Y).alpha - exact).max() for lam in (1e-2, 1e-4, 1e-6)]
    assert diffs[0] > diffs[1] > diffs[2]


def test_ck4m_round_trip(tmp_path):
    K = KernelMatrix(np.random.default_rng(8).standard_normal((4, 4)), [0, 3, 1, 2], 4)
    write_kernel_matrix(tmp_path / "k.ck4m", K)
    raw = (tmp_path / "k.ck4m").read_bytes()
    assert raw[:4] == b"CK4M" and len(raw) == 4 + 4 + 8 + 8 * 16 + 2 * 4
    back = read_kernel_matrix(tmp_path / "k.ck4m")
    np.testing.assert_array_equal(back.values, K.values)
    np.testing.assert_array_equal(back.labels, K.labels)
    (tmp_path / "bad.ck4m").write_bytes(raw[:-1])
    with pytest.raises(ValueError, match="expected"):
        read_kernel_matrix(tmp_path / "bad.ck4m")


def test_theorem1_trivial_group():
    xs = images(9, 4, (3, 3, 1))
    K = lambda a, b: readout_fc(compute_pair(a, b, KernelConfig(depth=1)))
    rep = verify_theorem1(K, trivial_group(3, 3), xs[:3], [0, 1, 0], xs[3:], ridge=0.1)
    assert rep.max_score_diff == 0 and rep.passed


def test_theorem1_translations():
    xs = images(10, 10, (3, 3, 2))
    cfg = KernelConfig(depth=2, padding=Padding.CIRCULAR)
    K = lambda a, b: readout_fc(compute_pair(a, b, cfg))
    for ridge in (0.0, 1e-3):
        rep = verify_theorem1(K, translation_group(3, 3), xs[:6], [0, 1, 2, 0, 1, 2], xs[6:], ridge=ridge)
        assert rep.passed and rep.max_score_diff <= 1e-6
        assert rep.ridge_augmented == pytest.approx(9 * ridge)


def test_theorem1_flip_gap():
    xs = images(11, 12, (4, 4, 1))
    cfg = KernelConfig(depth=2, family=Family.CNNGP)
    K = lambda a, b: readout_gap(compute_pair(a, b, cfg))
    rep = verify_theorem1(K, flip_group(4, 4), xs[:8], [0, 1] * 4, xs[8:], ridge=0.0)
    assert rep.max_score_diff <= 1e-6


def test_theorem1_rejects_non_equivariant():
    cfg = KernelConfig(depth=1, padding=Padding.ZERO)
    K = lambda a, b: readout_fc(compute_pair(a, b, cfg))
    xs = images(12, 5, (3, 3, 1))
    with pytest.raises(ValueError, match="violation"):
        verify_theorem1(K, translation_group(3, 3), xs[:3], [0, 1, 0], xs[3:])


def test_wrong_ridge_pairing_breaks_equality():
    xs = images(13, 8, (3, 3, 1))
    cfg = KernelConfig(depth=1, padding=Padding.CIRCULAR)
    K = lambda a, b: readout_fc(compute_pair(a, b, cfg))
    Y = one_hot([0, 1, 0, 1, 0], 2)
    rep = compare_augmented_paths(K, translation_group(3, 3), xs[:5], Y, xs[5:], ridge=0.1, ridge_augmented=0.1)
    assert not rep.passed
