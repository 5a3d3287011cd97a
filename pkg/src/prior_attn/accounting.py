"""Exact parameter counts and a declared-convention FLOP model.

FLOP convention (stated in every overhead report): one multiply-accumulate
counts as 2 FLOPs; softmax costs 4 FLOPs per entry, layer norm 8 and GELU 8
per element; bias construction costs are counted per (query, key, head)
pair on the full T x T grid: 3 for the adaptive ramp, 4 for the Gaussian
kernel, and 4 for the combined variant (its hard span cutoff is a
comparison, not a floating-point op). Only relative deltas between
variants are meaningful across conventions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .biases import AttentionKind
from .errors import DimensionError
from .model import ModelConfig

PRIOR_PARAMS_PER_HEAD = {
    AttentionKind.CAUSAL: 0,
    AttentionKind.ADAPTIVE: 1,
    AttentionKind.GAUSSIAN: 2,
    AttentionKind.GAAM: 3,
}

BIAS_FLOPS_PER_PAIR = {
    AttentionKind.CAUSAL: 0,
    AttentionKind.ADAPTIVE: 3,
    AttentionKind.GAUSSIAN: 4,
    AttentionKind.GAAM: 4,
}


def _mlp_params(d_in: int, d_hidden: int, d_out: int) -> int:
    return d_in * d_hidden + d_hidden + d_hidden * d_out + d_out


def count_params(config: ModelConfig) -> dict:
    """Exact integer parameter counts, broken down by component."""
    D, N, h = config.embed_dim, config.num_layers, config.num_heads
    attn = 4 * D * D + 4 * D
    mlp = _mlp_params(D, 4 * D, D)
    norms = 4 * D  # two layer norms per block
    priors = PRIOR_PARAMS_PER_HEAD[config.kind] * N * h
    transformer = N * (attn + mlp + norms) + 2 * D + priors  # incl. final norm

    embeddings = (
        config.latent_vocab * D + config.action_vocab * D + config.context_length * D
    )
    heads = (
        _mlp_params(D, D, D)  # dynamics latent
        + _mlp_params(D, D, config.reward_bins)
        + _mlp_params(D, D, config.action_vocab)  # policy
        + _mlp_params(D, D, config.value_bins)
    )
    return {
        "total": transformer + embeddings + heads,
        "transformer": transformer,
        "embeddings": embeddings,
        "heads": heads,
        "priors": priors,
    }


def count_flops(config: ModelConfig, T: int, kind: Optional[AttentionKind] = None) -> dict:
    """FLOPs of one transformer forward pass at sequence length T.

    Returns a breakdown in FLOPs plus the total in MFLOPs.
    """
    if T < 1:
        raise DimensionError(f"count_flops: T must be >= 1, got {T}")
    D, N, h = config.embed_dim, config.num_layers, config.num_heads
    kind = kind if kind is not None else config.kind

    projections = 2 * 4 * T * D * D + 4 * T * D  # q, k, v, out + biases
    logits = 2 * T * T * D + h * T * T  # QK^T + scaling
    softmax = 4 * h * T * T
    values = 2 * T * T * D
    mlp = 2 * 8 * T * D * D + 5 * T * D + 8 * 4 * D * T
    norms = 2 * 8 * T * D
    residual = 2 * T * D
    bias_prior = BIAS_FLOPS_PER_PAIR[kind] * h * T * T

    per_layer = projections + logits + softmax + values + mlp + norms + residual
    total = N * (per_layer + bias_prior) + 8 * T * D  # final norm
    return {
        "total_flops": total,
        "mflops": total / 1e6,
        "attention_core": N * (projections + logits + values),
        "bias_prior_flops": N * bias_prior,
    }


@dataclass
class OverheadRow:
    variant: str
    total_params: int
    transformer_params: int
    mflops: float
    delta_pct: Optional[float]  # None for the causal baseline


def overhead_table(config: ModelConfig, T: int) -> list[OverheadRow]:
    """One row per attention kind with causal as the baseline."""
    from dataclasses import replace

    base = count_flops(config, T, AttentionKind.CAUSAL)["mflops"]
    rows = []
    for kind in AttentionKind:
        cfg = replace(config, attention_type=kind.value, init_adaptive_span=None)
        params = count_params(cfg)
        mflops = count_flops(cfg, T, kind)["mflops"]
        delta = None if kind is AttentionKind.CAUSAL else 100.0 * (mflops - base) / base
        rows.append(
            OverheadRow(kind.value, params["total"], params["transformer"], mflops, delta)
        )
    return rows
