"""Layerwise dynamic program for the CNN-GP and CNTK kernel tensors.

Given two images the recursion starts from the patch-traced pixel
covariance and alternates a ReLU expectation step with a patch trace::

    Sigma0     = ptr(sum_c x_c (x) y_c) + gamma^2,           Theta0 = Sigma0
    K, Kdot    = (c_sigma / q^2) * E[relu relu], E[step step] under Lambda
    Sigma_h    = ptr(K) + gamma^2
    Theta_h    = ptr(Kdot * Theta_{h-1} + K) + gamma^2
    final      : Sigma_L = K,  Theta_L = Kdot * Theta_{L-1} + K   (no trace)

``Lambda`` at ``(i, j, i', j')`` pairs the self-variances ``Sigma(x, x)[ij, ij]``
and ``Sigma(y, y)[i'j', i'j']`` with the cross entry, so the self tensors
are carried along.  Two entry points exist: :func:`compute_pair` follows the
recursion literally with full self tensors, while :class:`KernelEngine`
caches per-image self diagonals and evaluates one image against a batch.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable

import numpy as np

from .arccos import C_SIGMA, relu_expectations
from .tensor_core import Padding, as_image, check_filter_size, diagonal4, patch_trace_all


class Family(str, Enum):
    CNNGP = "cnngp"
    CNTK = "cntk"

    @classmethod
    def parse(cls, value: "Family | str") -> "Family":
        if isinstance(value, Family):
            return value
        return cls(str(value).lower().replace("-", ""))


@dataclass(frozen=True)
class KernelConfig:
    """Architecture of the infinitely wide CNN.

    ``depth`` is the number of convolution + ReLU layers, i.e. the number of
    :func:`dp_layer` applications.
    """

    depth: int
    filter_size: int = 3
    bias: float = 0.0
    padding: Padding = Padding.ZERO
    family: Family = Family.CNTK
    precision: str = "f64"

    def __post_init__(self):
        object.__setattr__(self, "padding", Padding.parse(self.padding))
        object.__setattr__(self, "family", Family.parse(self.family))
        check_filter_size(self.filter_size)
        if int(self.depth) < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.bias < 0:
            raise ValueError("bias scale must be non-negative")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be 'f32' or 'f64'")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def with_(self, **changes) -> "KernelConfig":
        return replace(self, **changes)


@dataclass
class PairState:
    sigma_xy: np.ndarray
    sigma_xx: np.ndarray
    sigma_yy: np.ndarray
    theta_xy: np.ndarray | None = None
    layer: int = 0


def _check_pair(x, y, cfg: KernelConfig):
    x = as_image(x, cfg.dtype)
    y = as_image(y, cfg.dtype)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def sigma0(x, y, cfg: KernelConfig) -> np.ndarray:
    x, y = _check_pair(x, y, cfg)
    P, Q, C = x.shape
    outer = (x.reshape(P * Q, C) @ y.reshape(P * Q, C).T).reshape(P, Q, P, Q)
    out = patch_trace_all(outer, cfg.filter_size, cfg.padding)
    out += cfg.bias ** 2
    return out


def _activate(sigma, diag_x, diag_y, cfg: KernelConfig):
    """``(K, Kdot)`` for a cross tensor given the two self diagonals."""
    a = diag_x[..., :, :, None, None]
    d = diag_y[..., None, None, :, :]
    kappa, kdot = relu_expectations(a, d, sigma)
    scale = C_SIGMA / cfg.filter_size ** 2
    kappa *= scale
    kdot *= scale
    return kappa.astype(cfg.dtype, copy=False), kdot.astype(cfg.dtype, copy=False)


def _traced(T, cfg: KernelConfig):
    out = patch_trace_all(T, cfg.filter_size, cfg.padding)
    out += cfg.bias ** 2
    return out


def initial_state(x, y, cfg: KernelConfig) -> PairState:
    x, y = _check_pair(x, y, cfg)
    sxy = sigma0(x, y, cfg)
    sxx = sigma0(x, x, cfg)
    syy = sigma0(y, y, cfg)
    theta = sxy.copy() if cfg.family is Family.CNTK else None
    return PairState(sxy, sxx, syy, theta, layer=0)


def dp_layer(state: PairState, cfg: KernelConfig, is_last: bool) -> PairState:
    """Advance the recursion by one layer.

    On the last layer the CNN-GP tensor is ``K`` itself and the CNTK tensor is
    ``Kdot * Theta + K``, both without the patch trace and bias term.
    """
    dx = diagonal4(state.sigma_xx)
    dy = diagonal4(state.sigma_yy)
    k_xy, kd_xy = _activate(state.sigma_xy, dx, dy, cfg)
    k_xx, _ = _activate(state.sigma_xx, dx, dx, cfg)
    k_yy, _ = _activate(state.sigma_yy, dy, dy, cfg)

    theta = None
    if cfg.family is Family.CNTK:
        if state.theta_xy is None:
            raise ValueError("CNTK recursion needs a theta accumulator")
        theta = kd_xy * state.theta_xy + k_xy

    if is_last:
        return PairState(k_xy, k_xx, k_yy, theta, layer=state.layer + 1)
    return PairState(
        _traced(k_xy, cfg),
        _traced(k_xx, cfg),
        _traced(k_yy, cfg),
        None if theta is None else _traced(theta, cfg),
        layer=state.layer + 1,
    )


def compute_pair(x, y, cfg: KernelConfig) -> np.ndarray:
    """Final ``Sigma_L`` (CNN-GP) or ``Theta_L`` (CNTK) tensor for one pair."""
    state = initial_state(x, y, cfg)
    for h in range(1, cfg.depth + 1):
        state = dp_layer(state, cfg, is_last=h == cfg.depth)
    if cfg.family is Family.CNTK:
        return state.theta_xy
    return state.sigma_xy


class KernelEngine:
    """Batched evaluation with per-image self-state caching.

    The cross recursion only ever reads the diagonals of the self tensors, so
    an image's self state is its stack of diagonals ``diag Sigma_h(x, x)`` for
    ``h = 0 .. depth-1``.  Those are computed once per image
    (:meth:`self_diagonals`) and then shared by every pair the image takes
    part in.
    """

    def __init__(self, cfg: KernelConfig):
        self.cfg = cfg

    def self_diagonals(self, x) -> np.ndarray:
        cfg = self.cfg
        x = as_image(x, cfg.dtype)
        sigma = sigma0(x, x, cfg)
        diags = np.empty((cfg.depth,) + x.shape[:2], dtype=cfg.dtype)
        diags[0] = diagonal4(sigma)
        for h in range(1, cfg.depth):
            k, _ = _activate(sigma, diags[h - 1], diags[h - 1], cfg)
            sigma = _traced(k, cfg)
            diags[h] = diagonal4(sigma)
        return diags

    def pair_tensors(self, x, ys, diag_x, diag_ys, depths: Iterable[int] | None = None):
        """Final tensors of ``x`` against each image of the batch ``ys``.

        Returns ``{depth: array of shape (B, P, Q, P, Q)}``.  Requesting
        several depths costs one pass of the deepest one: the depth-``h``
        output only needs ``Sigma_{h-1}`` and ``Theta_{h-1}``.
        """
        cfg = self.cfg
        depths = sorted(set(depths or [cfg.depth]))
        if depths[0] < 1 or depths[-1] > cfg.depth:
            raise ValueError(f"depths must lie in [1, {cfg.depth}], got {depths}")
        x = as_image(x, cfg.dtype)
        ys = np.asarray(ys, dtype=cfg.dtype)
        if ys.ndim != 4 or ys.shape[1:] != x.shape:
            raise ValueError(f"batch shape {ys.shape} does not match image {x.shape}")
        B = ys.shape[0]
        P, Q, C = x.shape
        diag_x = np.asarray(diag_x, dtype=cfg.dtype)
        diag_ys = np.asarray(diag_ys, dtype=cfg.dtype)

        outer = np.matmul(x.reshape(1, P * Q, C), ys.reshape(B, P * Q, C).transpose(0, 2, 1))
        sigma = _traced(outer.reshape(B, P, Q, P, Q), cfg)
        theta = sigma.copy() if cfg.family is Family.CNTK else None

        out = {}
        last = depths[-1]
        for h in range(1, last + 1):
            k, kd = _activate(sigma, diag_x[h - 1], diag_ys[:, h - 1], cfg)
            if cfg.family is Family.CNTK:
                kd *= theta
                kd += k
                final = kd
            else:
                final = k
            if h in depths:
                out[h] = final
            if h < last:
                sigma = _traced(k, cfg)
                if theta is not None:
                    theta = _traced(final, cfg)
        return out
