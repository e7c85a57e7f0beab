"""Readouts collapsing a ``(P, Q, P, Q)`` kernel tensor to a kernel value.

* FC  -- trace of the tensor (fully connected last layer).
* GAP -- mean over all ``P^2 Q^2`` entries (global average pooling).
* LAP -- local average pooling of radius ``c``: the average of traces over
  independent shifts ``(di, dj, di', dj') in [-c, c]^4``.  The weight on an
  entry factorises into a row count ``u_row[i, i']`` and a column count
  ``u_col[j, j']``, scaled by ``1 / (2c + 1)^4``.

All readouts accept extra leading batch axes on the tensor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import Padding


@dataclass(frozen=True)
class Readout:
    kind: str  # "fc" | "gap" | "lap"
    c: int = 0
    padding: Padding = Padding.ZERO

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in ("fc", "gap", "lap"):
            raise ValueError(f"unknown readout {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "padding", Padding.parse(self.padding))
        if self.c < 0:
            raise ValueError("LAP radius must be non-negative")

    @classmethod
    def fc(cls) -> "Readout":
        return cls("fc")

    @classmethod
    def gap(cls) -> "Readout":
        return cls("gap")

    @classmethod
    def lap(cls, c: int, padding: Padding | str = Padding.ZERO) -> "Readout":
        return cls("lap", int(c), Padding.parse(padding))

    @classmethod
    def parse(cls, text: str, padding: Padding | str = Padding.ZERO) -> "Readout":
        """Parse ``"fc"``, ``"gap"`` or ``"lap:<c>"``."""
        text = text.strip().lower()
        if text.startswith("lap"):
            _, _, c = text.partition(":")
            return cls.lap(int(c or 0), padding)
        return cls(text)

    def __str__(self) -> str:
        return f"lap:{self.c}" if self.kind == "lap" else self.kind


@dataclass(frozen=True)
class LapWeights:
    P: int
    Q: int
    c: int
    u_row: np.ndarray
    u_col: np.ndarray
    scale: float

    def full(self) -> np.ndarray:
        """Materialised ``(P, Q, P, Q)`` weight tensor (tests and debugging only)."""
        return self.scale * np.einsum("ik,jl->ijkl", self.u_row, self.u_col)


def readout_fc(T) -> np.ndarray | float:
    T = np.asarray(T)
    P, Q = T.shape[-4], T.shape[-3]
    flat = T.reshape(T.shape[:-4] + (P * Q, P * Q))
    out = np.trace(flat, axis1=-2, axis2=-1)
    return float(out) if out.ndim == 0 else out


def readout_gap(T) -> np.ndarray | float:
    T = np.asarray(T)
    P, Q = T.shape[-4], T.shape[-3]
    out = T.reshape(T.shape[:-4] + (-1,)).sum(axis=-1) / (P * Q) ** 2
    return float(out) if out.ndim == 0 else out


def axis_multiplicity(n: int, c: int, padding: Padding | str) -> np.ndarray:
    """``u[i, i']``: number of ``(i0, d, d')`` with ``i0 + d = i`` and ``i0 + d' = i'``.

    ``i0`` ranges over the ``n`` positions and ``d, d'`` over ``[-c, c]``.
    """
    padding = Padding.parse(padding)
    idx = np.arange(1, n + 1)
    if padding is Padding.ZERO:
        i, ip = idx[:, None], idx[None, :]
        hi = np.minimum(np.minimum(i + c, ip + c), n)
        lo = np.maximum(np.maximum(i - c, ip - c), 1)
        return np.maximum(0, hi - lo + 1).astype(np.int64)
    # circular: count offset pairs by their difference mod n
    counts = np.zeros(n, dtype=np.int64)
    for d in range(-c, c + 1):
        for dp in range(-c, c + 1):
            counts[(d - dp) % n] += 1
    diff = (idx[:, None] - idx[None, :]) % n
    return counts[diff]


def lap_weights(P: int, Q: int, c: int, padding: Padding | str = Padding.ZERO) -> LapWeights:
    if c < 0:
        raise ValueError("LAP radius must be non-negative")
    return LapWeights(
        P, Q, int(c),
        axis_multiplicity(P, c, padding),
        axis_multiplicity(Q, c, padding),
        1.0 / (2 * c + 1) ** 4,
    )


def readout_lap(T, w: LapWeights) -> np.ndarray | float:
    T = np.asarray(T)
    P, Q = T.shape[-4], T.shape[-3]
    if (P, Q) != (w.P, w.Q):
        raise ValueError(f"tensor is {P}x{Q} but weights are {w.P}x{w.Q}")
    if w.c == 0:
        # identity weights: same sum as the trace, in the same order
        return readout_fc(T)
    lead = T.shape[:-4]
    # contract (i, i') as one matrix-vector product per (j, j') block
    Tt = np.moveaxis(T, (-4, -2), (-2, -1)).reshape(lead + (Q * Q, P * P))
    cols = (Tt @ w.u_row.reshape(-1).astype(T.dtype)).reshape(lead + (Q, Q))
    out = w.scale * np.sum(cols * w.u_col, axis=(-2, -1))
    return float(out) if np.ndim(out) == 0 else out


def apply_readout(T, readout: Readout, weights: LapWeights | None = None):
    if readout.kind == "fc":
        return readout_fc(T)
    if readout.kind == "gap":
        return readout_gap(T)
    if weights is None:
        weights = lap_weights(T.shape[-4], T.shape[-3], readout.c, readout.padding)
    return readout_lap(T, weights)


class ReadoutSet:
    """Several readouts sharing precomputed LAP weights for a fixed image size."""

    def __init__(self, readouts, P: int, Q: int):
        self.readouts = list(readouts)
        self._weights = {
            r: lap_weights(P, Q, r.c, r.padding) for r in self.readouts if r.kind == "lap"
        }

    def __iter__(self):
        return iter(self.readouts)

    def __len__(self):
        return len(self.readouts)

    def apply(self, T) -> np.ndarray:
        """Stack of readout values with shape ``(len(readouts),) + batch``."""
        return np.stack([np.asarray(apply_readout(T, r, self._weights.get(r)), dtype=np.float64)
                         for r in self.readouts])
