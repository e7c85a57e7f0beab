"""Kernel matrices, kernel ridge regression and augmentation-equivalence checks."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .augmentation import GroupElement, build_augmented_dataset, check_equivariance
from .dp import KernelConfig
from .readout import Readout

DEFAULT_RIDGE = 5e-5

CK4M_MAGIC = b"CK4M"
CK4M_VERSION = 1


class KernelSolveError(RuntimeError):
    pass


@dataclass
class KernelMatrix:
    values: np.ndarray
    labels: np.ndarray
    class_count: int
    self_values: np.ndarray | None = None  # raw K(x, x) before normalisation

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if self.values.shape != (n, n):
            raise ValueError(f"values shape {self.values.shape} does not match {n} labels")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels out of range for class_count")

    @property
    def n(self) -> int:
        return len(self.labels)


@dataclass
class RegressionModel:
    alpha: np.ndarray
    ridge: float
    train_self: np.ndarray | None = None
    residual: float = 0.0


def one_hot(labels, class_count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    Y = np.zeros((len(labels), class_count))
    Y[np.arange(len(labels)), labels] = 1.0
    return Y


def normalize_kernel(raw: np.ndarray, row_self, col_self=None) -> np.ndarray:
    """``K(x, y) / sqrt(K(x, x) K(y, y))``."""
    row_self = np.asarray(row_self, dtype=np.float64)
    col_self = row_self if col_self is None else np.asarray(col_self, dtype=np.float64)
    if (row_self <= 0).any() or (col_self <= 0).any():
        raise ValueError("self kernel values must be positive to normalise")
    return raw / np.sqrt(np.outer(row_self, col_self))


def kernel_from_function(K: Callable, images, labels=None, class_count=None,
                         normalize: bool = True) -> KernelMatrix:
    """Dense kernel matrix of a pair function (small sizes; tests and checks)."""
    images = list(images)
    n = len(images)
    raw = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            raw[i, j] = raw[j, i] = K(images[i], images[j])
    self_vals = np.diag(raw).copy()
    labels = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels)
    class_count = class_count or int(labels.max()) + 1
    values = normalize_kernel(raw, self_vals) if normalize else raw
    return KernelMatrix(values, labels, class_count, self_vals)


def assemble_kernel_matrix(images, labels, cfg: KernelConfig, readout: Readout | str = "fc",
                           class_count: int | None = None, threads: int = 1, workdir=None,
                           normalize: bool = True) -> KernelMatrix:
    """Normalised train kernel matrix via the tiled assembler.

    Self states come first, then the upper triangle of pairs, which is then
    mirrored.  A failing pair raises
    :class:`~lapkernel.assembly.PairComputationError` naming its indices.
    """
    from .assembly import KernelAssembler

    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("dataset is empty")
    readout = readout if isinstance(readout, Readout) else Readout.parse(readout, cfg.padding)
    blocks = KernelAssembler(cfg, [readout], threads=threads, workdir=workdir).run(images)
    raw, self_vals = blocks.train[0], blocks.train_self[0]
    labels = np.asarray(labels, dtype=np.int64)
    class_count = class_count or int(labels.max()) + 1
    values = normalize_kernel(raw, self_vals) if normalize else raw
    if normalize:
        np.fill_diagonal(values, 1.0)
    return KernelMatrix(values, labels, class_count, self_vals)


def krr_fit(K: KernelMatrix | np.ndarray, ridge: float = DEFAULT_RIDGE, targets=None,
            labels=None, class_count=None) -> RegressionModel:
    """Solve ``(K + ridge I) alpha = Y`` with ``Y`` the one-hot labels (or ``targets``)."""
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    if isinstance(K, KernelMatrix):
        values, labels, class_count, self_vals = K.values, K.labels, K.class_count, K.self_values
    else:
        values, self_vals = np.asarray(K, dtype=np.float64), None
    Y = one_hot(labels, class_count) if targets is None else np.asarray(targets, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    A = values + ridge * np.eye(len(values))
    try:
        alpha = scipy.linalg.solve(A, Y, assume_a="sym")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise KernelSolveError(f"kernel system is singular (ridge={ridge}, cond≈{np.linalg.cond(A):.3g})") from exc
    residual = float(np.linalg.norm(A @ alpha - Y) / max(np.linalg.norm(Y), 1e-300))
    return RegressionModel(alpha, ridge, None if self_vals is None else np.asarray(self_vals), residual)


def krr_predict(model: RegressionModel, k_cross, test_self=None, train_self=None):
    """Scores ``k_cross @ alpha`` and argmax labels (ties go to the lowest class).

    ``k_cross`` is ``(n_test, n_train)``.  When ``test_self`` is given the raw
    cross values are normalised with it and the training self values.
    """
    k_cross = np.atleast_2d(np.asarray(k_cross, dtype=np.float64))
    if k_cross.shape[1] != model.alpha.shape[0]:
        raise ValueError(f"cross kernel has {k_cross.shape[1]} columns, model has {model.alpha.shape[0]}")
    if test_self is not None:
        train_self = model.train_self if train_self is None else train_self
        if train_self is None:
            raise ValueError("training self values are needed to normalise test columns")
        k_cross = normalize_kernel(k_cross, test_self, train_self)
    scores = k_cross @ model.alpha
    return scores, np.argmax(scores, axis=1)


# --- CK4M container -------------------------------------------------------

def write_kernel_matrix(path, K: KernelMatrix) -> None:
    """``CK4M`` | u32 version | u64 n | n*n f64 row-major | n u16 labels, little endian."""
    n = K.n
    with open(path, "wb") as fh:
        fh.write(CK4M_MAGIC)
        fh.write(struct.pack("<IQ", CK4M_VERSION, n))
        fh.write(np.ascontiguousarray(K.values, dtype="<f8").tobytes())
        fh.write(np.asarray(K.labels, dtype="<u2").tobytes())


def read_kernel_matrix(path, class_count: int | None = None) -> KernelMatrix:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CK4M_MAGIC:
        raise ValueError(f"{path}: not a CK4M file")
    version, n = struct.unpack_from("<IQ", data, 4)
    if version != CK4M_VERSION:
        raise ValueError(f"{path}: unsupported CK4M version {version}")
    off = 16
    expected = off + 8 * n * n + 2 * n
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype="<f8", count=n * n, offset=off).reshape(n, n).astype(np.float64)
    labels = np.frombuffer(data, dtype="<u2", count=n, offset=off + 8 * n * n).astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if n else 1
    return KernelMatrix(values, labels, class_count)


# --- augmentation equivalence ---------------------------------------------

@dataclass
class EquivalenceReport:
    max_score_diff: float
    tol: float
    scores_kernel: np.ndarray = field(repr=False)
    scores_dataset: np.ndarray = field(repr=False)
    ridge: float = 0.0
    ridge_augmented: float = 0.0
    equivariance_violation: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_score_diff <= self.tol


def _gram(K, rows, cols) -> np.ndarray:
    return np.array([[K(a, b) for b in cols] for a in rows])


def compare_augmented_paths(K, G: Sequence[GroupElement], train_images, targets, test_images,
                            ridge: float = 0.0, ridge_augmented: float | None = None,
                            kernel_scale: float = 1.0, tol: float = 1e-6) -> EquivalenceReport:
    """Predictions of ``kernel_scale * K^G`` on ``D`` versus ``K`` on ``D_G``.

    ``K^G(x, y) = mean_g K(g x, y)``.  With ridge ``lam`` on the first path the
    matching ridge on the augmented dataset is ``lam * |G| / kernel_scale``,
    which is the default for ``ridge_augmented``.
    """
    G = list(G)
    train_images = np.asarray(train_images)
    test_images = np.asarray(test_images)
    targets = np.asarray(targets, dtype=np.float64)
    if ridge_augmented is None:
        ridge_augmented = ridge * len(G) / kernel_scale

    # path A: augmented kernel on the original data
    cross_g = [_gram(K, [g(x) for x in train_images], train_images) for g in G]
    KG = kernel_scale * np.mean(cross_g, axis=0)
    alpha = krr_fit(KG, ridge, targets=targets).alpha
    test_g = [_gram(K, [g(x) for x in test_images], train_images) for g in G]
    scores_a = (kernel_scale * np.mean(test_g, axis=0)) @ alpha

    # path B: plain kernel on the augmented dataset
    aug = build_augmented_dataset(train_images, np.arange(len(train_images)), G)
    KX = _gram(K, aug.images, aug.images)
    alpha_b = krr_fit(KX, ridge_augmented, targets=targets[aug.labels]).alpha
    scores_b = _gram(K, test_images, aug.images) @ alpha_b

    diff = float(np.max(np.abs(scores_a - scores_b)))
    return EquivalenceReport(diff, tol, scores_a, scores_b, ridge, ridge_augmented)


def verify_theorem1(K, G: Sequence[GroupElement], train_images, labels, test_images,
                    ridge: float = 0.0, class_count: int | None = None, tol: float = 1e-6,
                    equivariance_tol: float = 1e-10, seed: int = 0) -> EquivalenceReport:
    """Augmented-kernel prediction versus augmented-dataset prediction.

    The kernel is first checked for equivariance under ``G``; a violation
    aborts with :class:`ValueError`.  With ridge ``lam`` the augmented
    dataset is solved with ridge ``lam * |G|`` (``alpha_{i,g} = alpha_i / |G|``
    then solves it exactly).
    """
    train_images = np.asarray(train_images)
    channels = train_images.shape[-1]
    eq = check_equivariance(K, G, trials=2, tol=equivariance_tol, channels=channels, seed=seed)
    if not eq.passed:
        raise ValueError(f"kernel is not equivariant under the group (violation {eq.max_violation:.3g})")
    labels = np.asarray(labels)
    Y = one_hot(labels, class_count or int(labels.max()) + 1)
    report = compare_augmented_paths(K, G, train_images, Y, test_images, ridge=ridge, tol=tol)
    report.equivariance_violation = eq.max_violation
    return report
