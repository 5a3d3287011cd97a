"""Multi-head self-attention with learnable temporal priors.

Each head can carry a learnable look-back span (adaptive), a learnable
Gaussian positional kernel (gaussian), or both (gaam). Spans act as a
post-softmax multiplier followed by row renormalization, which matches
the additive log-mask formulation in the hard-ramp limit while keeping
the span differentiable.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import autodiff as ad
from . import biases
from .autodiff import Tensor
from .biases import AttentionKind
from .errors import ConfigError

SIGMA_FLOOR = 1e-3


def inverse_softplus(y: float) -> float:
    """Raw value r with softplus(r) == y exactly in float64.

    log(expm1(y)) is the analytic inverse; the ULP scan absorbs the rare
    rounding mismatch so that derived values reproduce their configured
    initializations bit-exactly.
    """
    if y <= 0:
        raise ConfigError(f"inverse_softplus: need y > 0, got {y}")
    raw = float(np.log(np.expm1(y)))
    for _ in range(4):
        fwd = float(np.logaddexp(0.0, raw))
        if fwd == y:
            return raw
        raw = float(np.nextafter(raw, np.inf if fwd < y else -np.inf))
    return raw


def raw_span_for(span: float) -> float:
    return inverse_softplus(span)


def raw_sigma_for(sigma: float) -> float:
    """Raw value r with softplus(r) + SIGMA_FLOOR == sigma exactly."""
    if sigma <= SIGMA_FLOOR:
        raise ConfigError(f"sigma must exceed the floor {SIGMA_FLOOR}, got {sigma}")
    raw = float(np.log(np.expm1(sigma - SIGMA_FLOOR)))
    for _ in range(4):
        fwd = float(np.logaddexp(0.0, raw)) + SIGMA_FLOOR
        if fwd == sigma:
            return raw
        raw = float(np.nextafter(raw, np.inf if fwd < sigma else -np.inf))
    return raw


class PriorParams:
    """Per-head learnable prior parameters for one attention layer.

    Raw parameters are unconstrained; the derived span and width are pure
    functions of them: span = clamp(softplus(raw_span), 0, max_span) and
    sigma = softplus(raw_sigma) + SIGMA_FLOOR. Only the parameters the
    attention kind actually uses are created.
    """

    def __init__(
        self,
        kind: AttentionKind,
        heads: int,
        init_span: float,
        init_mu: float,
        init_sigma: float,
        max_span: float,
        ramp: float,
    ):
        self.kind = kind
        self.heads = heads
        self.max_span = max_span
        self.ramp = ramp
        self.raw_span: Optional[Tensor] = None
        self.mu: Optional[Tensor] = None
        self.raw_sigma: Optional[Tensor] = None
        if kind in (AttentionKind.ADAPTIVE, AttentionKind.GAAM):
            self.raw_span = ad.parameter(np.full(heads, raw_span_for(init_span)))
        if kind in (AttentionKind.GAUSSIAN, AttentionKind.GAAM):
            self.mu = ad.parameter(np.full(heads, float(init_mu)))
            self.raw_sigma = ad.parameter(np.full(heads, raw_sigma_for(init_sigma)))

    def span(self) -> Tensor:
        return ad.clamp(ad.softplus(self.raw_span), 0.0, self.max_span)

    def sigma(self) -> Tensor:
        return ad.add(ad.softplus(self.raw_sigma), SIGMA_FLOOR)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        if self.raw_span is not None:
            out.append(("prior.raw_span", self.raw_span))
        if self.mu is not None:
            out.append(("prior.mu", self.mu))
        if self.raw_sigma is not None:
            out.append(("prior.raw_sigma", self.raw_sigma))
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        """Derived per-head values (L, mu, sigma) for reporting."""
        out: dict[str, np.ndarray] = {}
        with ad.no_grad():
            if self.raw_span is not None:
                out["L"] = self.span().data.copy()
            if self.mu is not None:
                out["mu"] = self.mu.data.copy()
                out["sigma"] = self.sigma().data.copy()
        return out


class MultiHeadAttention:
    """Causal multi-head attention over [B, T, D] with optional priors."""

    def __init__(
        self,
        embed_dim: int,
        heads: int,
        kind: AttentionKind,
        rng: np.random.Generator,
        dropout_p: float = 0.0,
        init_span: float = 6.0,
        init_mu: float = 6.0,
        init_sigma: float = 1.0,
        max_span: float = 20.0,
        ramp: float = 3.0,
    ):
        if embed_dim % heads != 0:
            raise ConfigError(f"embed_dim {embed_dim} not divisible by heads {heads}")
        if not isinstance(kind, AttentionKind):
            try:
                kind = AttentionKind(kind)
            except ValueError:
                valid = [k.value for k in AttentionKind]
                raise ConfigError(f"unknown attention kind {kind!r}; valid: {valid}")
        self.embed_dim = embed_dim
        self.heads = heads
        self.head_dim = embed_dim // heads
        self.kind = kind
        self.dropout_p = dropout_p

        def w():
            return ad.parameter(rng.normal(0.0, 0.02, size=(embed_dim, embed_dim)))

        self.w_q, self.w_k, self.w_v, self.w_o = w(), w(), w(), w()
        self.b_q = ad.parameter(np.zeros(embed_dim))
        self.b_k = ad.parameter(np.zeros(embed_dim))
        self.b_v = ad.parameter(np.zeros(embed_dim))
        self.b_o = ad.parameter(np.zeros(embed_dim))
        self.priors = PriorParams(
            kind, heads, init_span, init_mu, init_sigma, max_span, ramp
        )

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [
            ("w_q", self.w_q),
            ("b_q", self.b_q),
            ("w_k", self.w_k),
            ("b_k", self.b_k),
            ("w_v", self.w_v),
            ("b_v", self.b_v),
            ("w_o", self.w_o),
            ("b_o", self.b_o),
        ]
        out.extend(self.priors.named_parameters())
        return out

    def _split_heads(self, x: Tensor, B: int, T: int) -> Tensor:
        return ad.transpose(
            ad.reshape(x, (B, T, self.heads, self.head_dim)), (0, 2, 1, 3)
        )

    def _bias(self, T: int) -> Tensor:
        if self.kind in (AttentionKind.CAUSAL, AttentionKind.ADAPTIVE):
            return biases.causal_bias(T)
        return biases.gaussian_bias(self.priors.mu, self.priors.sigma(), T)

    def forward(
        self,
        tokens: Tensor,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> tuple[Tensor, Tensor]:
        """Returns (context [B, T, D], attention weights [B, h, T, T]).

        Reported weights are post-renormalization and pre-dropout, so each
        row sums to 1 and future positions carry exactly zero mass.
        """
        B, T, D = tokens.shape
        q = self._split_heads(ad.add(ad.matmul(tokens, self.w_q), self.b_q), B, T)
        k = self._split_heads(ad.add(ad.matmul(tokens, self.w_k), self.b_k), B, T)
        v = self._split_heads(ad.add(ad.matmul(tokens, self.w_v), self.b_v), B, T)

        logits = ad.scale(
            ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.head_dim)
        )
        weights = ad.softmax_lastdim(logits, self._bias(T))

        if self.kind in (AttentionKind.ADAPTIVE, AttentionKind.GAAM):
            mask = biases.adaptive_soft_mask(self.priors.span(), self.priors.ramp, T)
            # a fully saturated mask (every visible multiplier 1) is a no-op
            # and has zero span gradient; skipping keeps the reduction to
            # plain causal attention exact
            full = mask.data.size / mask.data.shape[-1] * (T + 1) / 2
            if float(mask.data.sum()) != full:
                masked = ad.mul(weights, mask)
                weights = ad.div(masked, ad.reduce_sum(masked, axis=-1, keepdims=True))

        attended = weights
        if train and self.dropout_p > 0.0:
            if rng is None:
                raise ConfigError("dropout needs an rng in training mode")
            keep = (rng.random(size=(B, self.heads, T, T)) >= self.dropout_p).astype(
                np.float64
            ) / (1.0 - self.dropout_p)
            attended = ad.mul(weights, Tensor(keep))

        ctx = ad.matmul(attended, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, T, D))
        out = ad.add(ad.matmul(ctx, self.w_o), self.b_o)
        return out, weights
