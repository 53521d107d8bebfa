"""Prediction losses, L2 and Gaussian KL regularizers, and the KL-weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson

from .autodiff import DimensionError, Tensor, add, clip, exp, log, mul, sub, tmean, tsum

BCE_EPS = 1e-7

# softplus^-1(1.0): the rho giving a unit standard deviation
UNIT_SIGMA_RHO = math.log(math.e - 1.0)


def softplus_np(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def inv_softplus(sigma):
    """rho such that softplus(rho) == sigma."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if (sigma <= 0).any():
        raise ValueError("sigma must be positive")
    # log(e^s - 1) = s + log(1 - e^-s)
    return sigma + np.log(-np.expm1(-sigma))


@dataclass(frozen=True)
class LossConfig:
    kl_weight: float = 5e-3
    base_loss_kind: str = "bce"
    prior_mu: float = 0.0
    prior_rho: float = UNIT_SIGMA_RHO
    kl_reduction: str = "mean"

    def __post_init__(self):
        if self.kl_reduction not in ("sum", "mean"):
            raise ValueError(f"unknown kl_reduction {self.kl_reduction!r}")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be non-negative")
        if self.base_loss_kind not in ("bce", "mse"):
            raise ValueError(f"unknown base loss {self.base_loss_kind!r}")
        if not math.isfinite(self.prior_rho):
            raise ValueError("prior_rho must be finite")

    @property
    def prior_sigma(self) -> float:
        return float(softplus_np(self.prior_rho))


def _check_labels(target: np.ndarray) -> None:
    if not np.isin(target, (0.0, 1.0)).all():
        raise ValueError("targets must be 0 or 1")


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy, predictions clamped to [1e-7, 1 - 1e-7]."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise DimensionError(f"bce: pred {list(pred.shape)} vs target {list(t.shape)}")
    _check_labels(t)
    p = clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    tt = Tensor._wrap(t)
    ll = mul(tt, log(p)) + mul(1.0 - tt.data, log(sub(1.0, p)))
    return -tmean(ll)


def mse_loss(pred: Tensor, target) -> Tensor:
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise DimensionError(f"mse: pred {list(pred.shape)} vs target {list(t.shape)}")
    d = sub(pred, Tensor._wrap(t))
    return tmean(mul(d, d))


def base_loss(pred: Tensor, target, kind: str = "bce") -> Tensor:
    if kind == "bce":
        return bce_loss(pred, target)
    if kind == "mse":
        return mse_loss(pred, target)
    raise ValueError(f"unknown base loss {kind!r}")


def l2_reg(params, target) -> Tensor:
    """Sum of squared differences ||params - target||^2."""
    p = params if isinstance(params, Tensor) else Tensor(params)
    t = target if isinstance(target, Tensor) else Tensor(target)
    if p.shape != t.shape:
        raise DimensionError(f"l2_reg: {list(p.shape)} vs {list(t.shape)}")
    d = sub(p, t)
    return tsum(mul(d, d))


def kl_gaussian(mu0, sigma0, mu1, sigma1) -> Tensor:
    """KL(N(mu0, sigma0^2) || N(mu1, sigma1^2)), summed over elements.

    Any argument may be a Tensor (differentiable) or array-like (constant).
    """
    args = [a if isinstance(a, Tensor) else Tensor(a) for a in (mu0, sigma0, mu1, sigma1)]
    m0, s0, m1, s1 = args
    shapes = {a.shape for a in args if a.data.ndim}
    if len(shapes) > 1:
        raise DimensionError(f"kl_gaussian: mismatched shapes {sorted(shapes)}")
    if (s0.data <= 0).any() or (s1.data <= 0).any():
        raise ValueError("kl_gaussian: sigma must be positive")
    dm = sub(m0, m1)
    # log(s1^2 / s0^2) = 2 log s1 - 2 log s0
    log_ratio = mul(2.0, sub(log(s1), log(s0)))
    if s1.requires_grad:
        inv_s1sq = exp(mul(-2.0, log(s1)))
    else:
        inv_s1sq = Tensor._wrap(1.0 / (s1.data * s1.data))
    quad = mul(add(mul(s0, s0), mul(dm, dm)), inv_s1sq)
    return mul(0.5, tsum(sub(add(log_ratio, quad), 1.0)))


def kl_gaussian_np(mu0, sigma0, mu1, sigma1) -> float:
    """Plain float version of :func:`kl_gaussian` for reporting."""
    mu0, sigma0, mu1, sigma1 = (np.asarray(a, dtype=np.float64) for a in (mu0, sigma0, mu1, sigma1))
    if (sigma0 <= 0).any() or (sigma1 <= 0).any():
        raise ValueError("kl_gaussian: sigma must be positive")
    v = 0.5 * (2 * np.log(sigma1 / sigma0) + (sigma0**2 + (mu0 - mu1) ** 2) / sigma1**2 - 1.0)
    return float(np.sum(v))


def default_grid(mu0, sigma0, mu1, sigma1, span: float = 12.0, per_sigma: int = 200) -> np.ndarray:
    lo = min(mu0 - span * sigma0, mu1 - span * sigma1)
    hi = max(mu0 + span * sigma0, mu1 + span * sigma1)
    step = min(sigma0, sigma1) / per_sigma
    n = int(math.ceil((hi - lo) / step)) | 1
    return np.linspace(lo, hi, n)


def kl_numeric(mu0, sigma0, mu1, sigma1, grid=None) -> float:
    """Quadrature estimate of the integral of g log(g/h) for two 1-D normals.

    Independent of the closed form; used as a test oracle.
    """
    if sigma0 <= 0 or sigma1 <= 0:
        raise ValueError("sigma must be positive")
    x = default_grid(mu0, sigma0, mu1, sigma1) if grid is None else np.asarray(grid, dtype=np.float64)
    if x.ndim != 1 or x.size < 3 or not (np.diff(x) > 0).all():
        raise ValueError("degenerate integration grid")
    for m, s in ((mu0, sigma0), (mu1, sigma1)):
        if x[0] > m - 8 * s or x[-1] < m + 8 * s:
            raise ValueError("integration grid must span 8 sigma around both means")
    log_g = -0.5 * ((x - mu0) / sigma0) ** 2 - math.log(sigma0) - 0.5 * math.log(2 * math.pi)
    log_h = -0.5 * ((x - mu1) / sigma1) ** 2 - math.log(sigma1) - 0.5 * math.log(2 * math.pi)
    return float(simpson(np.exp(log_g) * (log_g - log_h), x=x))


def total_loss(base, kl, cfg: LossConfig):
    """base + kl_weight * kl, nothing else."""
    if isinstance(kl, Tensor):
        return add(base, mul(cfg.kl_weight, kl))
    return base + cfg.kl_weight * kl
