"""Closed-form ReLU expectations under a bivariate Gaussian.

For ``(u, v) ~ N(0, [[a, b], [b, d]])`` with ``s = sqrt(a d)`` and
``rho = b / s``::

    E[relu(u) relu(v)]   = s / (2 pi) * (sqrt(1 - rho^2) + rho (pi - arccos rho))
    E[step(u) step(v)]   = (pi - arccos rho) / (2 pi)

Both vanish when ``s == 0``.  Everything here is vectorised over numpy
arrays; the scalar :class:`Cov2` wrapper exists for validation and tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# E[relu(u)^2] = Var(u) * C_SIGMA / 2, i.e. ReLU preserves the variance scale.
C_SIGMA = 2.0

_PSD_REL = 1e-9
_PSD_ABS = 1e-12


@dataclass(frozen=True)
class Cov2:
    a: float
    d: float
    b: float

    def __post_init__(self):
        check_cov(np.float64(self.a), np.float64(self.d), np.float64(self.b))


def check_cov(a, d, b) -> None:
    a, d, b = np.asarray(a), np.asarray(d), np.asarray(b)
    if np.isnan(a).any() or np.isnan(d).any() or np.isnan(b).any():
        raise ValueError("covariance contains NaN")
    if (a < -_PSD_ABS).any() or (d < -_PSD_ABS).any():
        raise ValueError("negative variance in covariance")
    ad = np.clip(a, 0, None) * np.clip(d, 0, None)
    if (b * b > ad * (1 + _PSD_REL) + _PSD_ABS).any():
        raise ValueError("covariance is not positive semi-definite")


def _rho_and_scale(a, d, b):
    s = np.sqrt(np.clip(a, 0, None) * np.clip(d, 0, None))
    live = s > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(live, b / np.where(live, s, 1.0), 0.0)
    np.clip(rho, -1.0, 1.0, out=rho)
    return s, rho, live


def relu_expectations(a, d, b):
    """Return ``(E[relu(u) relu(v)], E[step(u) step(v)])`` elementwise.

    No validation: this is the hot path of the kernel recursion, where
    ``|b|`` may exceed ``sqrt(a d)`` by round-off and gets clamped.
    """
    s, rho, live = _rho_and_scale(a, d, b)
    angle = np.pi - np.arccos(rho)
    kappa = s * (np.sqrt(1.0 - rho * rho) + rho * angle) / (2 * np.pi)
    kdot = angle / (2 * np.pi)
    kdot = np.where(live, kdot, 0.0)
    return kappa, kdot


def expect_relu_prod(cov: Cov2 | None = None, *, a=None, d=None, b=None):
    if cov is not None:
        a, d, b = cov.a, cov.d, cov.b
    else:
        check_cov(a, d, b)
    kappa, _ = relu_expectations(np.asarray(a, float), np.asarray(d, float), np.asarray(b, float))
    return float(kappa) if np.ndim(kappa) == 0 else kappa


def expect_relu_deriv_prod(cov: Cov2 | None = None, *, a=None, d=None, b=None):
    if cov is not None:
        a, d, b = cov.a, cov.d, cov.b
    else:
        check_cov(a, d, b)
    _, kdot = relu_expectations(np.asarray(a, float), np.asarray(d, float), np.asarray(b, float))
    return float(kdot) if np.ndim(kdot) == 0 else kdot
