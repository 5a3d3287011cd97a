"""Attention bias construction: causal mask, adaptive span ramp, Gaussian kernel.

All constructors return tensors over (query index i, key index j) with the
strict upper triangle (j > i) fully blocked, and are differentiable in the
learnable prior parameters they consume. Scalar heads and per-head vectors
are both accepted: a parameter of shape [h] yields a bias of shape [h, T, T].
"""

from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError


class AttentionKind(str, Enum):
    """The four attention-bias variants; values are the config tokens."""

    CAUSAL = "causal"
    ADAPTIVE = "adaptive"
    GAUSSIAN = "gaussian"
    GAAM = "gaam"


def relative_offsets(T: int) -> np.ndarray:
    """Matrix of i - j over all (i, j); negative above the diagonal."""
    idx = np.arange(T, dtype=np.float64)
    return idx[:, None] - idx[None, :]


def future_mask(T: int) -> np.ndarray:
    """Boolean matrix, True strictly above the diagonal (j > i)."""
    return np.triu(np.ones((T, T), dtype=bool), k=1)


def _check_T(T: int) -> None:
    if T < 1:
        raise DimensionError(f"sequence length must be >= 1, got {T}")


def _per_head(param, T: int) -> Tensor:
    """Lift a scalar or [h] parameter to broadcast against a [.., T, T] grid."""
    p = ad.as_tensor(param)
    if p.ndim == 0:
        return ad.reshape(p, (1, 1))
    if p.ndim == 1:
        return ad.reshape(p, (p.shape[0], 1, 1))
    raise DimensionError(f"prior parameter must be scalar or 1-d, got shape {p.shape}")


def causal_bias(T: int) -> Tensor:
    """0 where j <= i, -inf where j > i."""
    _check_T(T)
    data = np.where(future_mask(T), -np.inf, 0.0)
    return Tensor(data)


def adaptive_soft_mask(span, ramp: float, T: int) -> Tensor:
    """Soft span multipliers m(i, j) in [0, 1], differentiable in the span.

    For d = i - j >= 0: m = clamp((span + ramp - d) / ramp, 0, 1); future
    positions get 0. As ramp -> 0 this converges to the hard window
    d <= span.
    """
    _check_T(T)
    if ramp <= 0:
        raise ContractError(f"ramp must be positive, got {ramp}")
    span_t = _per_head(span, T)
    offs = Tensor(relative_offsets(T))
    m = ad.clamp(ad.scale(ad.sub(ad.add(span_t, ramp), offs), 1.0 / ramp), 0.0, 1.0)
    past = Tensor((~future_mask(T)).astype(np.float64))
    return ad.mul(m, past)


def gaussian_bias(mu, sigma, T: int) -> Tensor:
    """Gaussian positional kernel -(i - j - mu)^2 / (2 sigma^2) on j <= i.

    Future positions are -inf. Differentiable in mu and sigma.
    """
    _check_T(T)
    sigma_t = _per_head(sigma, T)
    if np.any(sigma_t.data <= 0.0):
        raise ContractError("gaussian_bias: sigma must be positive")
    mu_t = _per_head(mu, T)
    offs = Tensor(relative_offsets(T))
    num = ad.square(ad.sub(offs, mu_t))
    denom = ad.scale(ad.square(sigma_t), 2.0)
    fin = ad.negate(ad.div(num, denom))
    return ad.masked_fill(fin, future_mask(T), -np.inf)


def combined_bias(gaussian: Tensor, mask: Tensor) -> Tensor:
    """G + log(m): Gaussian saliency confined to the (soft) span window.

    log(0) = -inf, so softmax of logits + B equals Gaussian-weighted
    attention multiplied by the span mask and renormalized. Strictly causal
    whenever either input is.
    """
    if gaussian.shape[-2:] != mask.shape[-2:]:
        raise DimensionError(
            f"combined_bias: shapes {gaussian.shape} and {mask.shape} disagree"
        )
    return ad.add(gaussian, ad.mask_log(mask))
