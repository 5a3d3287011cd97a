"""Span penalties and the max-norm projection for learned look-back spans.

Penalties act on the derived spans (so gradients reach the raw parameters
through the softplus/clamp chain) and never touch the Gaussian mean or
width parameters. Max-norm is enforced as a hard projection applied after
each optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import inverse_softplus
from .autodiff import Tensor
from .errors import ContractError


@dataclass(frozen=True)
class SpanPenalty:
    """Penalty scheme selector: kind in {l1, l2, maxnorm, none}."""

    kind: str
    coefficient: float = 0.025
    cap: float = 10.0  # max-norm cap c

    def __post_init__(self):
        if self.kind not in ("l1", "l2", "maxnorm", "none"):
            raise ContractError(f"unknown span penalty kind {self.kind!r}")
        if self.coefficient < 0:
            raise ContractError("penalty coefficient must be >= 0")
        if self.kind == "maxnorm" and self.cap <= 0:
            raise ContractError("max-norm cap must be positive")


def l1_penalty(spans: Tensor, coefficient: float) -> Tensor:
    """coefficient * sum(spans); encourages sparse, minimal spans."""
    return ad.scale(ad.reduce_sum(spans), coefficient)


def l2_penalty(spans: Tensor, coefficient: float) -> Tensor:
    """coefficient * sum(spans^2); shrinks spans softly."""
    return ad.scale(ad.reduce_sum(ad.square(spans)), coefficient)


def span_penalty_term(prior_params, penalty: SpanPenalty) -> Tensor:
    """Sum the selected penalty over every layer that carries spans.

    Returns a scalar tensor; exactly zero (constant) when no layer has a
    span parameter or the scheme contributes no loss term (maxnorm, none).
    """
    if penalty.kind in ("none", "maxnorm"):
        return Tensor(0.0)
    terms = []
    for prior in prior_params:
        if prior.raw_span is None:
            continue
        if penalty.kind == "l1":
            terms.append(l1_penalty(prior.span(), penalty.coefficient))
        else:
            terms.append(l2_penalty(prior.span(), penalty.coefficient))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def maxnorm_project(prior_params, cap: float) -> int:
    """Reset raw spans so every derived span satisfies span <= cap.

    Runs after the optimizer step; only offending heads are touched, and
    projection is idempotent (softplus(new raw) == cap exactly). Returns
    the number of heads projected.
    """
    if cap <= 0:
        raise ContractError("max-norm cap must be positive")
    projected = 0
    target_raw = inverse_softplus(cap)
    for prior in prior_params:
        if prior.raw_span is None:
            continue
        with ad.no_grad():
            spans = prior.span().data
        over = spans > cap
        if over.any():
            prior.raw_span.data[over] = target_raw
            projected += int(over.sum())
    return projected
