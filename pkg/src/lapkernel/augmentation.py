"""Translation and flip operators, their groups, and augmented kernels.

A :class:`GroupElement` is stored in the canonical form ``T_{di,dj} o F^flip``
(flip first, then translate).  Composition uses ``F o T_{a,b} = T_{-a,b} o F``.
Translation groups wrap around, so they only form a group under circular
padding; asking for one with zero padding is an error.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor_core import Padding, as_image

PairKernel = Callable[[np.ndarray, np.ndarray], float]


def translate(x, di: int, dj: int, scheme: Padding | str = Padding.CIRCULAR) -> np.ndarray:
    """``out[i, j, c] = x[i + di, j + dj, c]`` with out-of-range sources padded."""
    x = as_image(x)
    scheme = Padding.parse(scheme)
    if scheme is Padding.CIRCULAR:
        return np.roll(x, shift=(-di, -dj), axis=(0, 1))
    P, Q, _ = x.shape
    out = np.zeros_like(x)
    src_i = slice(max(0, di), min(P, P + di))
    dst_i = slice(max(0, -di), min(P, P - di))
    src_j = slice(max(0, dj), min(Q, Q + dj))
    dst_j = slice(max(0, -dj), min(Q, Q - dj))
    if src_i.start < src_i.stop and src_j.start < src_j.stop:
        out[dst_i, dst_j] = x[src_i, src_j]
    return out


def hflip(x) -> np.ndarray:
    """Reverse the first spatial axis: ``out[i] = x[P + 1 - i]``."""
    return as_image(x)[::-1].copy()


@dataclass(frozen=True)
class GroupElement:
    P: int
    Q: int
    di: int = 0
    dj: int = 0
    flipped: bool = False

    def __post_init__(self):
        object.__setattr__(self, "di", self.di % self.P)
        object.__setattr__(self, "dj", self.dj % self.Q)

    @classmethod
    def identity(cls, P: int, Q: int) -> "GroupElement":
        return cls(P, Q)

    def __call__(self, x) -> np.ndarray:
        x = as_image(x)
        if x.shape[:2] != (self.P, self.Q):
            raise ValueError(f"element acts on {self.P}x{self.Q} images, got {x.shape[:2]}")
        if self.flipped:
            x = hflip(x)
        return translate(x, self.di, self.dj, Padding.CIRCULAR)

    def __matmul__(self, other: "GroupElement") -> "GroupElement":
        """``(self @ other)(x) == self(other(x))``."""
        if (self.P, self.Q) != (other.P, other.Q):
            raise ValueError("elements act on different image sizes")
        odi = -other.di if self.flipped else other.di
        return GroupElement(self.P, self.Q, self.di + odi, self.dj + other.dj,
                            self.flipped != other.flipped)

    def inverse(self) -> "GroupElement":
        if self.flipped:
            # (T_a F)^-1 = F T_-a = T_(a_i, -a_j) F
            return GroupElement(self.P, self.Q, self.di, -self.dj, True)
        return GroupElement(self.P, self.Q, -self.di, -self.dj, False)

    def __str__(self) -> str:
        return f"T({self.di},{self.dj})" + ("∘F" if self.flipped else "")


def _require_circular(padding: Padding | str):
    if Padding.parse(padding) is not Padding.CIRCULAR:
        raise ValueError("translation groups require circular padding; "
                         "zero-padded translations are not invertible")


def trivial_group(P: int, Q: int) -> list[GroupElement]:
    return [GroupElement.identity(P, Q)]


def flip_group(P: int, Q: int) -> list[GroupElement]:
    return [GroupElement.identity(P, Q), GroupElement(P, Q, flipped=True)]


def translation_group(P: int, Q: int, padding: Padding | str = Padding.CIRCULAR) -> list[GroupElement]:
    _require_circular(padding)
    return [GroupElement(P, Q, a, b) for a in range(P) for b in range(Q)]


def flip_translation_group(P: int, Q: int, padding: Padding | str = Padding.CIRCULAR) -> list[GroupElement]:
    _require_circular(padding)
    return [GroupElement(P, Q, a, b, f) for f in (False, True) for a in range(P) for b in range(Q)]


def augmented_kernel(K: PairKernel, G: Sequence[GroupElement]) -> PairKernel:
    """``K^G(x, y) = mean_{g in G} K(g(x), y)``."""
    G = list(G)
    if not G:
        raise ValueError("group must be non-empty")

    def KG(x, y):
        return sum(K(g(x), y) for g in G) / len(G)

    return KG


@dataclass
class EquivarianceReport:
    max_violation: float
    tol: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tol


def check_equivariance(K: PairKernel, G: Sequence[GroupElement], trials: int = 3,
                       tol: float = 1e-10, channels: int = 1, seed: int = 0,
                       relative: bool = True) -> EquivarianceReport:
    """Largest ``|K(g x, g y) - K(x, y)|`` over random pairs and group elements.

    With ``relative`` the violation is divided by ``max(|K(x, y)|, |K(x, x)|)``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    G = list(G)
    P, Q = G[0].P, G[0].Q
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal((P, Q, channels))
        y = rng.standard_normal((P, Q, channels))
        base = K(x, y)
        scale = max(abs(base), abs(K(x, x))) if relative else 1.0
        for g in G:
            worst = max(worst, abs(K(g(x), g(y)) - base) / (scale or 1.0))
    return EquivarianceReport(worst, tol, trials)


@dataclass
class AugmentedDataset:
    images: np.ndarray
    labels: np.ndarray
    source: np.ndarray  # index into the base dataset
    element: list[GroupElement]

    def __len__(self):
        return len(self.labels)


def build_augmented_dataset(images, labels, G: Sequence[GroupElement]) -> AugmentedDataset:
    """All ``(g(x_n), y_n)``, grouped by element in the order of ``G``.

    Groups list the identity first, so the originals lead (``D`` then ``D_F``
    for the flip scheme).
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    G = list(G)
    out, lab, src, elem = [], [], [], []
    for g in G:
        for n, x in enumerate(images):
            out.append(g(x))
            lab.append(labels[n])
            src.append(n)
            elem.append(g)
    return AugmentedDataset(np.stack(out), np.asarray(lab), np.asarray(src), elem)
