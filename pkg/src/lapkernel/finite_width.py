"""Finite-width random CNNs used to check the analytic kernels by Monte Carlo.

The network is the one whose infinite-width limit the dynamic program
computes: ``depth`` convolution layers with standard-Gaussian filters and
biases, pre-activation ``W * x + bias_scale * b`` and post-activation scaling
``sqrt(c_sigma / (C q^2))``, followed by an FC, GAP or box-blur + FC readout.
Gradients are written out by hand (no autodiff) and guarded by a central
finite-difference check.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .arccos import C_SIGMA
from .dp import KernelConfig, compute_pair
from .readout import lap_weights, readout_lap
from .tensor_core import Padding, as_image, pad_spatial, trace4


@dataclass
class CnnParams:
    weights: list[np.ndarray]   # (q, q, C_in, C_out) per layer
    biases: list[np.ndarray]    # (C_out,) per layer
    head: np.ndarray            # (P, Q, C_L) for fc/bblur, (C_L,) for gap

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self._parts()])

    def _parts(self):
        return [*self.weights, *self.biases, self.head]

    def dot(self, other: "CnnParams") -> float:
        return float(sum(np.vdot(a, b) for a, b in zip(self._parts(), other._parts())))

    def copy(self) -> "CnnParams":
        return CnnParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.head.copy())


def _readout_kind(readout: str) -> tuple[str, int]:
    readout = readout.lower()
    if readout.startswith("bblur"):
        _, _, c = readout.partition(":")
        return "bblur", int(c or 0)
    if readout not in ("fc", "gap"):
        raise ValueError(f"unknown readout {readout!r}")
    return readout, 0


def init_params(rng: np.random.Generator, shape: tuple[int, int, int], cfg: KernelConfig,
                width: int, readout: str = "fc") -> CnnParams:
    P, Q, C = shape
    kind, _ = _readout_kind(readout)
    q = cfg.filter_size
    weights, biases = [], []
    cin = C
    for _ in range(cfg.depth):
        weights.append(rng.standard_normal((q, q, cin, width)))
        biases.append(rng.standard_normal(width))
        cin = width
    head = rng.standard_normal(width if kind == "gap" else (P, Q, width))
    return CnnParams(weights, biases, head)


def _im2col(h: np.ndarray, q: int, padding: Padding) -> np.ndarray:
    """``(N, P, Q, C)`` -> ``(N*P*Q, q*q*C)`` with window offsets in row-major order."""
    N, P, Q, C = h.shape
    r = (q - 1) // 2
    hp = pad_spatial(h, r, padding, axes=(1, 2))
    cols = np.empty((N, P, Q, q, q, C), dtype=h.dtype)
    for a in range(q):
        for b in range(q):
            cols[:, :, :, a, b, :] = hp[:, a:a + P, b:b + Q, :]
    return cols.reshape(N * P * Q, q * q * C)


def _fold_axis(arr: np.ndarray, axis: int, n: int, r: int, padding: Padding) -> np.ndarray:
    if r == 0:
        return arr
    if padding is Padding.ZERO:
        return np.take(arr, np.arange(r, r + n), axis=axis)
    out_shape = list(arr.shape)
    out_shape[axis] = n
    out = np.zeros(out_shape, dtype=arr.dtype)
    src = (np.arange(arr.shape[axis]) - r) % n
    moved = np.moveaxis(out, axis, 0)
    np.add.at(moved, src, np.moveaxis(arr, axis, 0))
    return out


def _col2im(dcols: np.ndarray, shape, q: int, padding: Padding) -> np.ndarray:
    """Adjoint of :func:`_im2col`."""
    N, P, Q, C = shape
    r = (q - 1) // 2
    d = dcols.reshape(N, P, Q, q, q, C)
    dhp = np.zeros((N, P + 2 * r, Q + 2 * r, C), dtype=dcols.dtype)
    for a in range(q):
        for b in range(q):
            dhp[:, a:a + P, b:b + Q, :] += d[:, :, :, a, b, :]
    dhp = _fold_axis(dhp, 1, P, r, padding)
    return _fold_axis(dhp, 2, Q, r, padding)


def box_blur(h: np.ndarray, c: int, padding: Padding, axes=(1, 2)) -> np.ndarray:
    """Mean over the ``(2c+1)``-window along each listed axis (self-adjoint)."""
    if c == 0:
        return h
    out = h
    for ax in axes:
        n = out.shape[ax]
        padded = pad_spatial(out, c, padding, axes=(ax,))
        acc = np.zeros_like(out)
        for s in range(2 * c + 1):
            acc += np.take(padded, np.arange(s, s + n), axis=ax)
        out = acc / (2 * c + 1)
    return out


def _forward(params: CnnParams, xs: np.ndarray, cfg: KernelConfig, readout: str):
    kind, c = _readout_kind(readout)
    q = cfg.filter_size
    N, P, Q, _ = xs.shape
    h = xs
    cache = []
    for W, b in zip(params.weights, params.biases):
        cout = W.shape[3]
        cols = _im2col(h, q, cfg.padding)
        z = cols @ W.reshape(-1, cout) + cfg.bias * b
        scale = np.sqrt(C_SIGMA / (cout * q * q))
        cache.append((h.shape, cols, z, scale))
        h = (scale * np.maximum(z, 0.0)).reshape(N, P, Q, cout)
    if kind == "fc":
        f = np.einsum("npqc,pqc->n", h, params.head)
    elif kind == "gap":
        f = h.sum(axis=(1, 2)) @ params.head / (P * Q)
    else:
        f = np.einsum("npqc,pqc->n", box_blur(h, c, cfg.padding), params.head)
    return f, h, cache


def cnn_forward(params: CnnParams, x, cfg: KernelConfig, readout: str = "fc") -> float:
    x = as_image(x)
    f, _, _ = _forward(params, x[None], cfg, readout)
    return float(f[0])


def cnn_gradients(params: CnnParams, xs, cfg: KernelConfig, readout: str = "fc"):
    """Outputs and per-input parameter gradients for a batch ``(N, P, Q, C)``."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 3:
        xs = xs[None]
    kind, c = _readout_kind(readout)
    q = cfg.filter_size
    N, P, Q, _ = xs.shape
    f, h, cache = _forward(params, xs, cfg, readout)

    if kind == "fc":
        g_head = h
        dh = np.broadcast_to(params.head, h.shape)
    elif kind == "gap":
        g_head = h.sum(axis=(1, 2)) / (P * Q)
        dh = np.broadcast_to(params.head / (P * Q), h.shape)
    else:
        g_head = box_blur(h, c, cfg.padding)
        dh = np.broadcast_to(box_blur(params.head[None], c, cfg.padding)[0], h.shape)

    g_w = [None] * len(params.weights)
    g_b = [None] * len(params.biases)
    for layer in reversed(range(len(params.weights))):
        W = params.weights[layer]
        in_shape, cols, z, scale = cache[layer]
        cout = W.shape[3]
        dz = (dh.reshape(-1, cout) * scale) * (z > 0)
        cols_n = cols.reshape(N, P * Q, -1)
        dz_n = dz.reshape(N, P * Q, cout)
        g_w[layer] = np.matmul(cols_n.transpose(0, 2, 1), dz_n).reshape((N,) + W.shape)
        g_b[layer] = cfg.bias * dz_n.sum(axis=1)
        if layer:
            dh = _col2im(dz @ W.reshape(-1, cout).T, in_shape, q, cfg.padding)

    grads = [CnnParams([g[n] for g in g_w], [g[n] for g in g_b], g_head[n]) for n in range(N)]
    return f, grads


def gradient_check(cfg: KernelConfig, shape=(4, 4, 2), width: int = 4, readout: str = "fc",
                   seed: int = 0, step: float = 1e-6) -> float:
    """Max elementwise relative error of analytic versus central-difference gradients."""
    rng = np.random.default_rng(seed)
    params = init_params(rng, shape, cfg, width, readout)
    x = rng.standard_normal(shape)
    _, (grad,) = cnn_gradients(params, x[None], cfg, readout)
    analytic = grad.flat()
    numeric = np.empty_like(analytic)
    parts = params._parts()
    pos = 0
    for p in parts:
        flat = p.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + step
            fp = cnn_forward(params, x, cfg, readout)
            flat[k] = old - step
            fm = cnn_forward(params, x, cfg, readout)
            flat[k] = old
            numeric[pos] = (fp - fm) / (2 * step)
            pos += 1
    floor = 1e-6 * np.max(np.abs(analytic))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


@dataclass
class MCEstimate:
    estimate: float
    stderr: float
    samples: int

    def zscore(self, target: float) -> float:
        return abs(self.estimate - target) / self.stderr if self.stderr > 0 else np.inf


def _jackknife_cov(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    n = len(a)
    sa, sb, sab = a.sum(), b.sum(), (a * b).sum()
    cov = (sab - sa * sb / n) / (n - 1)
    la, lb, lab = sa - a, sb - b, sab - a * b
    loo = (lab - la * lb / (n - 1)) / (n - 2)
    se = np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return float(cov), float(se)


def _draws(seed: int, samples: int, fn, threads: int):
    seeds = np.random.SeedSequence(seed).spawn(samples)
    if threads <= 1:
        return [fn(np.random.default_rng(s)) for s in seeds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda s: fn(np.random.default_rng(s)), seeds))


def mc_cnngp(x, y, cfg: KernelConfig, readout: str = "fc", width: int = 512, samples: int = 2000,
             seed: int = 0, exact_head: bool = False, threads: int = 1) -> MCEstimate:
    """Monte-Carlo covariance of ``(f(x), f(y))`` over random networks.

    With ``exact_head`` the Gaussian readout weights are integrated out
    analytically, which leaves the same expectation with lower variance.
    """
    x, y = as_image(x), as_image(y)
    xs = np.stack([x, y])
    kind, c = _readout_kind(readout)
    P, Q = x.shape[:2]

    def one(rng):
        params = init_params(rng, x.shape, cfg, width, readout)
        f, h, _ = _forward(params, xs, cfg, readout)
        if not exact_head:
            return f[0], f[1]
        if kind == "fc":
            return float(np.vdot(h[0], h[1])), 0.0
        if kind == "gap":
            s = h.sum(axis=(1, 2))
            return float(s[0] @ s[1]) / (P * Q) ** 2, 0.0
        blurred = box_blur(h, c, cfg.padding)
        return float(np.vdot(blurred[0], blurred[1])), 0.0

    vals = np.array(_draws(seed, samples, one, threads))
    if exact_head:
        v = vals[:, 0]
        return MCEstimate(float(v.mean()), float(v.std(ddof=1) / np.sqrt(samples)), samples)
    cov, se = _jackknife_cov(vals[:, 0], vals[:, 1])
    return MCEstimate(cov, se, samples)


def mc_cntk(x, y, cfg: KernelConfig, readout: str = "fc", width: int = 512, samples: int = 500,
            seed: int = 0, threads: int = 1) -> MCEstimate:
    """Mean over random networks of the parameter-gradient inner product."""
    x, y = as_image(x), as_image(y)
    xs = np.stack([x, y])

    def one(rng):
        params = init_params(rng, x.shape, cfg, width, readout)
        _, (gx, gy) = cnn_gradients(params, xs, cfg, readout)
        return gx.dot(gy)

    vals = np.array(_draws(seed, samples, one, threads))
    return MCEstimate(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(samples)), samples)


@dataclass
class BBlurReport:
    trace_blurred: float
    lap_value: float
    tol: float

    @property
    def discrepancy(self) -> float:
        return abs(self.trace_blurred - self.lap_value) / max(abs(self.lap_value), 1e-300)

    @property
    def passed(self) -> bool:
        return self.discrepancy <= self.tol


def verify_bblur_lap(x, y, cfg: KernelConfig, c: int, tol: float = 1e-12, tensor=None) -> BBlurReport:
    """Trace of the box-blurred final tensor versus the LAP readout."""
    T = compute_pair(x, y, cfg) if tensor is None else tensor
    blurred = box_blur(T, c, cfg.padding, axes=(0, 1, 2, 3))
    P, Q = T.shape[:2]
    lap = readout_lap(T, lap_weights(P, Q, c, cfg.padding))
    return BBlurReport(trace4(blurred), lap, tol)
