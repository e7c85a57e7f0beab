"""Images, order-4 kernel tensors and the padding-aware reductions on them.

Images are ``(P, Q, C)`` arrays and kernel tensors are ``(P, Q, P, Q)``
arrays indexed ``(i, j, i', j')``.  The math-facing scalar helpers
(:func:`resolve_index`, :func:`patch_trace`) take 1-based indices; the
vectorised :func:`patch_trace_all` works on whole tensors (with optional
leading batch axes) and is what the dynamic program actually calls.
"""
from __future__ import annotations

from enum import Enum

import numpy as np


class Padding(str, Enum):
    CIRCULAR = "circular"
    ZERO = "zero"

    @classmethod
    def parse(cls, value: "Padding | str") -> "Padding":
        if isinstance(value, Padding):
            return value
        return cls(str(value).lower())


def as_image(x, dtype=np.float64) -> np.ndarray:
    """Validate and return ``x`` as a ``(P, Q, C)`` array.

    A 2-D array is promoted to a single channel.
    """
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"image must have shape (P, Q, C) with positive extents, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return arr


def check_tensor4(T) -> np.ndarray:
    T = np.asarray(T)
    if T.ndim != 4 or T.shape[0] != T.shape[2] or T.shape[1] != T.shape[3]:
        raise ValueError(f"expected a (P, Q, P, Q) tensor, got shape {T.shape}")
    return T


def check_filter_size(q: int) -> int:
    q = int(q)
    if q < 1 or q % 2 == 0:
        raise ValueError(f"filter size must be a positive odd integer, got {q}")
    return q


def resolve_index(i: int, extent: int, scheme: Padding | str) -> tuple[bool, int]:
    """Map a 1-based, possibly out-of-range index onto ``[1, extent]``.

    Returns ``(in_range, index)``.  Under zero padding an out-of-range index
    yields ``(False, i)``; the index is meaningless in that case.
    """
    if extent < 1:
        raise ValueError("extent must be >= 1")
    scheme = Padding.parse(scheme)
    if scheme is Padding.CIRCULAR:
        return True, (i - 1) % extent + 1
    return (1 <= i <= extent), i


def trace4(T) -> float:
    """Sum of ``T[i, j, i, j]`` over all spatial positions."""
    T = check_tensor4(T)
    P, Q = T.shape[:2]
    return float(T.reshape(P * Q, P * Q).trace())


def diagonal4(T: np.ndarray) -> np.ndarray:
    """The ``(..., P, Q)`` array of entries ``T[..., i, j, i, j]``."""
    P, Q = T.shape[-4], T.shape[-3]
    flat = T.reshape(T.shape[:-4] + (P * Q, P * Q))
    return np.diagonal(flat, axis1=-2, axis2=-1).reshape(T.shape[:-4] + (P, Q))


def patch_trace(T, i: int, j: int, ip: int, jp: int, q: int, scheme: Padding | str) -> float:
    """Trace of ``T`` restricted to the window pair centred at ``(i, j)`` and ``(i', j')``.

    Both windows move together: the sum runs over offsets ``(a, b)`` in
    ``[-(q-1)/2, (q-1)/2]^2`` of ``T[i+a, j+b, i'+a, j'+b]``, because the
    convolution applies the same filter tap to both positions.  Out-of-range
    entries contribute nothing under zero padding and wrap under circular
    padding.  This is the slow scalar reference; see :func:`patch_trace_all`.
    """
    T = check_tensor4(T)
    q = check_filter_size(q)
    scheme = Padding.parse(scheme)
    P, Q = T.shape[:2]
    r = (q - 1) // 2
    total = 0.0
    for a in range(-r, r + 1):
        ok_i, ii = resolve_index(i + a, P, scheme)
        ok_ip, iip = resolve_index(ip + a, P, scheme)
        if not (ok_i and ok_ip):
            continue
        for b in range(-r, r + 1):
            ok_j, jj = resolve_index(j + b, Q, scheme)
            ok_jp, jjp = resolve_index(jp + b, Q, scheme)
            if ok_j and ok_jp:
                total += T[ii - 1, jj - 1, iip - 1, jjp - 1]
    return float(total)


def pad_spatial(T: np.ndarray, r: int, scheme: Padding, axes: tuple[int, ...]) -> np.ndarray:
    """Pad ``T`` by ``r`` on each listed axis, wrapping or with zeros."""
    if r == 0:
        return T
    widths = [(0, 0)] * T.ndim
    for ax in axes:
        widths[ax] = (r, r)
    mode = "wrap" if scheme is Padding.CIRCULAR else "constant"
    return np.pad(T, widths, mode=mode)


def patch_trace_all(T: np.ndarray, q: int, scheme: Padding | str) -> np.ndarray:
    """:func:`patch_trace` evaluated at every ``(i, j, i', j')`` at once.

    ``T`` may carry leading batch axes.  The window sum is separable: the
    row offset only touches axes ``i, i'`` and the column offset only
    ``j, j'``, so it is done as two passes of ``q`` shifted adds over a
    padded copy.  Summation order is fixed, so results are reproducible.
    """
    q = check_filter_size(q)
    scheme = Padding.parse(scheme)
    if q == 1:
        return np.array(T, copy=True)
    r = (q - 1) // 2
    P, Q = T.shape[-4], T.shape[-3]
    lead = T.ndim - 4
    padded = pad_spatial(T, r, scheme, axes=tuple(lead + k for k in range(4)))

    # columns first: (.., P+2r, Q, P+2r, Q)
    idx = [slice(None)] * T.ndim
    cols = None
    for b in range(q):
        idx[lead + 1] = slice(b, b + Q)
        idx[lead + 3] = slice(b, b + Q)
        view = padded[tuple(idx)]
        cols = view.copy() if cols is None else np.add(cols, view, out=cols)

    idx = [slice(None)] * T.ndim
    out = None
    for a in range(q):
        idx[lead + 0] = slice(a, a + P)
        idx[lead + 2] = slice(a, a + P)
        view = cols[tuple(idx)]
        out = view.copy() if out is None else np.add(out, view, out=out)
    return out
