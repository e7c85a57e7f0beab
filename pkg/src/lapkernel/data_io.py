"""Dataset loading, preprocessing and random-patch features."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = [f"data_batch_{k}.bin" for k in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CKIM_MAGIC = b"CKIM"
CKIM_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray   # (N, P, Q, C)
    labels: np.ndarray   # (N,)
    class_count: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label outside [0, class_count)")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, note: str | None = None) -> "LabeledDataset":
        prov = dict(self.provenance)
        if note:
            prov.setdefault("steps", []).append(note)
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_count, prov)


# --- CIFAR-10 --------------------------------------------------------------

def read_cifar10_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """One binary batch: 1 label byte + 3072 channel-planar pixels per record."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DatasetFormatError(
            f"{path}: size {len(raw)} is not a positive multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DatasetFormatError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return images, labels


def load_cifar10(path) -> tuple[LabeledDataset, LabeledDataset]:
    """Train (five batches) and test sets from the CIFAR-10 binary distribution."""
    path = Path(path)
    parts = [read_cifar10_batch(path / name) for name in CIFAR_TRAIN_FILES]
    train = LabeledDataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                           10, {"source": "cifar10", "path": str(path), "split": "train"})
    x, y = read_cifar10_batch(path / CIFAR_TEST_FILE)
    test = LabeledDataset(x, y, 10, {"source": "cifar10", "path": str(path), "split": "test"})
    return train, test


# --- Fashion-MNIST (IDX) ---------------------------------------------------

def _open_maybe_gzip(path: Path) -> bytes:
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def read_idx(path) -> np.ndarray:
    path = Path(path)
    data = _open_maybe_gzip(path)
    if len(data) < 8:
        raise DatasetFormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise DatasetFormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    body = data[4 + 4 * ndim:]
    if len(body) != int(np.prod(dims)):
        raise DatasetFormatError(f"{path}: dims {dims} need {int(np.prod(dims))} bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def _find(path: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (path / name).exists():
            return path / name
    raise FileNotFoundError(f"{stem}(.gz) not found in {path}")


def load_fashion_mnist(path) -> tuple[LabeledDataset, LabeledDataset]:
    path = Path(path)
    out = []
    for split, prefix in (("train", "train"), ("test", "t10k")):
        images = read_idx(_find(path, f"{prefix}-images-idx3-ubyte"))
        labels = read_idx(_find(path, f"{prefix}-labels-idx1-ubyte"))
        if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
            raise DatasetFormatError(f"{path}: {split} images {images.shape} and labels {labels.shape} disagree")
        out.append(LabeledDataset(images[..., None].astype(np.float64) / 255.0, labels.astype(np.int64), 10,
                                  {"source": "fashion_mnist", "path": str(path), "split": split}))
    return out[0], out[1]


# --- preprocessing ---------------------------------------------------------

def standardize(train: LabeledDataset, *others: LabeledDataset, floor: float = 1e-8):
    """Per-channel mean/std from ``train`` applied to ``train`` and every other set."""
    mean = train.images.mean(axis=(0, 1, 2))
    std = np.maximum(train.images.std(axis=(0, 1, 2)), floor)

    def apply(ds):
        prov = dict(ds.provenance)
        prov.setdefault("steps", []).append("standardize")
        return LabeledDataset((ds.images - mean) / std, ds.labels, ds.class_count, prov)

    result = [apply(train)] + [apply(d) for d in others]
    return result[0] if not others else tuple(result)


def downsample(ds: LabeledDataset, factor: int) -> LabeledDataset:
    """Average-pool images by an integer factor (desk-scale experiments)."""
    if factor == 1:
        return ds
    N, P, Q, C = ds.images.shape
    if P % factor or Q % factor:
        raise ValueError(f"{P}x{Q} images are not divisible by {factor}")
    x = ds.images.reshape(N, P // factor, factor, Q // factor, factor, C).mean(axis=(2, 4))
    prov = dict(ds.provenance)
    prov.setdefault("steps", []).append(f"downsample{factor}")
    return LabeledDataset(x, ds.labels, ds.class_count, prov)


# --- random patch features -------------------------------------------------

@dataclass
class PatchBank:
    filters: np.ndarray      # (M, k, k, C)
    zca: np.ndarray          # (k*k*C, k*k*C)
    gamma_feature: float = 1.0
    flip_closed: bool = False
    eps: float = 1e-5

    @property
    def size(self) -> int:
        return len(self.filters)

    @property
    def k(self) -> int:
        return self.filters.shape[1]

    def flip_partner(self) -> np.ndarray:
        """Index of each filter's horizontally flipped twin (flip-closed banks)."""
        if not self.flip_closed:
            raise ValueError("bank is not flip-closed")
        half = self.size // 2
        return np.concatenate([np.arange(half, 2 * half), np.arange(half)])


def _patches(images: np.ndarray, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
    N, P, Q, C = images.shape
    which = rng.integers(0, N, size=n)
    ii = rng.integers(0, P - k + 1, size=n)
    jj = rng.integers(0, Q - k + 1, size=n)
    return np.stack([images[w, i:i + k, j:j + k] for w, i, j in zip(which, ii, jj)])


def zca_matrix(X: np.ndarray, eps: float) -> np.ndarray:
    """Symmetric whitening ``U diag(1/sqrt(lambda + eps)) U^T`` of ``X^T X / n``."""
    cov = X.T @ X / len(X)
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    return (evecs / np.sqrt(evals + eps)) @ evecs.T


def build_patch_bank(images, M: int = 2048, k: int = 5, seed: int = 0, eps: float = 1e-5,
                     flip_closed: bool = True, gamma_feature: float = 1.0) -> PatchBank:
    """Random patches -> per-patch mean removal -> unit norm -> ZCA -> unit norm.

    With ``flip_closed`` the horizontally flipped copy of every filter is
    appended, doubling the bank.
    """
    images = np.asarray(images, dtype=np.float64)
    if M < 1:
        raise ValueError("need at least one patch")
    N, P, Q, C = images.shape
    if k > min(P, Q):
        raise ValueError(f"patch size {k} exceeds image size {P}x{Q}")
    rng = np.random.default_rng(seed)
    X = _patches(images, k, M, rng).reshape(M, -1)
    X = X - X.mean(axis=1, keepdims=True)
    X = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)
    W = zca_matrix(X, eps)
    F = X @ W
    F = F / np.maximum(np.linalg.norm(F, axis=1, keepdims=True), 1e-12)
    filters = F.reshape(M, k, k, C)
    if flip_closed:
        filters = np.concatenate([filters, filters[:, ::-1]])
    return PatchBank(filters, W, gamma_feature, flip_closed, eps)


def patch_featurize(x, bank: PatchBank) -> np.ndarray:
    """``[relu(conv(x) - g), relu(-conv(x) - g)]`` over valid positions.

    Output shape ``(P-k+1, Q-k+1, 2M)``: positive block then negative block,
    filter order preserved.
    """
    x = np.asarray(x, dtype=np.float64)
    P, Q, C = x.shape
    k = bank.k
    if P < k or Q < k:
        raise ValueError(f"{P}x{Q} image is smaller than the {k}x{k} filters")
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(0, 1))  # (P',Q',C,k,k)
    windows = windows.transpose(0, 1, 3, 4, 2).reshape(P - k + 1, Q - k + 1, -1)
    conv = windows @ bank.filters.reshape(bank.size, -1).T
    g = bank.gamma_feature
    return np.concatenate([np.maximum(conv - g, 0.0), np.maximum(-conv - g, 0.0)], axis=-1)


def featurize_dataset(ds: LabeledDataset, bank: PatchBank) -> LabeledDataset:
    feats = np.stack([patch_featurize(x, bank) for x in ds.images])
    prov = dict(ds.provenance)
    prov.setdefault("steps", []).append(f"patches{bank.size}")
    return LabeledDataset(feats, ds.labels, ds.class_count, prov)


# --- CKIM tensor container -------------------------------------------------

def write_ckim(path, array) -> None:
    """``CKIM`` | u32 version | u32 ndim | u64 dims... | f32 payload, little endian."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(CKIM_MAGIC)
        fh.write(struct.pack("<II", CKIM_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def read_ckim(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != CKIM_MAGIC:
        raise DatasetFormatError(f"{path}: not a CKIM file")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != CKIM_VERSION:
        raise DatasetFormatError(f"{path}: unsupported CKIM version {version}")
    dims = struct.unpack_from(f"<{ndim}Q", data, 12)
    off = 12 + 8 * ndim
    count = int(np.prod(dims)) if ndim else 1
    if len(data) != off + 4 * count:
        raise DatasetFormatError(f"{path}: payload size mismatch for dims {dims}")
    return np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def write_dataset_ckim(stem, ds: LabeledDataset) -> tuple[Path, Path]:
    stem = Path(stem)
    img, lab = stem.with_suffix(".images.ckim"), stem.with_suffix(".labels.ckim")
    write_ckim(img, ds.images)
    write_ckim(lab, ds.labels)
    return img, lab


def read_dataset_ckim(stem, class_count: int | None = None) -> LabeledDataset:
    stem = Path(stem)
    images = read_ckim(stem.with_suffix(".images.ckim")).astype(np.float64)
    labels = read_ckim(stem.with_suffix(".labels.ckim")).astype(np.int64)
    return LabeledDataset(images, labels, class_count or int(labels.max()) + 1,
                          {"source": "ckim", "path": str(stem)})


# --- synthetic data --------------------------------------------------------

def synthetic_dataset(n: int, shape=(8, 8, 3), classes: int = 2, seed: int = 0,
                      noise: float = 0.6) -> LabeledDataset:
    """Class prototypes placed at random circular offsets plus Gaussian noise.

    Offline stand-in for real images; labels are translation invariant, so
    pooling readouts have something to gain.
    """
    rng = np.random.default_rng(seed)
    P, Q, C = shape
    protos = rng.standard_normal((classes, P, Q, C))
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    shifts = rng.integers(-2, 3, size=(n, 2))
    imgs = np.stack([np.roll(protos[y], tuple(s), axis=(0, 1)) for y, s in zip(labels, shifts)])
    imgs = imgs + noise * rng.standard_normal(imgs.shape)
    return LabeledDataset(imgs, labels, classes, {"source": "synthetic", "seed": seed})
