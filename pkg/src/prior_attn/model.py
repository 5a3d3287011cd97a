"""Transformer world-model backbone: fused state-action token embedding,
pre-norm attention/MLP blocks, SimNorm latents, dynamics and prediction heads.

One token per environment step (latent embedding + action embedding +
positional embedding summed), so relative attention offsets are measured
in whole environment steps.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .attention import MultiHeadAttention
from .autodiff import Tensor
from .biases import AttentionKind
from .errors import ConfigError, ContractError

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture plus prior/training hyperparameters.

    Attention-prior key names follow the published configuration flags
    (init_adaptive_mu, init_adaptive_sigma, init_adaptive_span,
    max_adaptive_span, adapt_span_loss, adapt_span_ramp) bit-exactly.
    """

    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 8
    context_length: int = 10
    attention_type: str = "causal"
    init_adaptive_span: Optional[float] = None  # resolved: 6.0, or 10.0 for gaam
    init_adaptive_mu: float = 6.0
    init_adaptive_sigma: float = 1.0
    max_adaptive_span: float = 20.0
    adapt_span_ramp: float = 3.0
    adapt_span_loss: float = 0.025
    span_penalty: str = "l1"
    maxnorm_c: float = 10.0
    reward_bins: int = 3
    value_bins: int = 3
    simnorm_V: int = 8
    simnorm_tau: float = 1.0
    latent_vocab: int = 16
    action_vocab: int = 4
    dropout_p: float = 0.1
    latent_loss_coef: float = 10.0
    reward_loss_coef: float = 1.0

    def __post_init__(self):
        try:
            self.attention_type = AttentionKind(self.attention_type).value
        except ValueError:
            valid = [k.value for k in AttentionKind]
            raise ConfigError(
                f"attention_type must be one of {valid}, got {self.attention_type!r}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.embed_dim % self.simnorm_V != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by simnorm_V {self.simnorm_V}"
            )
        if self.simnorm_tau <= 0:
            raise ConfigError(f"simnorm_tau must be positive, got {self.simnorm_tau}")
        if self.init_adaptive_span is None:
            self.init_adaptive_span = (
                10.0 if self.attention_type == AttentionKind.GAAM.value else 6.0
            )
        if self.span_penalty not in ("l1", "l2", "maxnorm", "none"):
            raise ConfigError(
                f"span_penalty must be l1, l2, maxnorm or none, got {self.span_penalty!r}"
            )

    @property
    def kind(self) -> AttentionKind:
        return AttentionKind(self.attention_type)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DynamicsOutput:
    """Per-position next-latent prediction and reward distribution."""

    latent_logits: Tensor  # [B, T, D], pre-SimNorm
    latent: Tensor  # [B, T, D], SimNorm simplices
    reward_logits: Tensor  # [B, T, reward_bins]


@dataclass
class PredictionOutput:
    policy_logits: Tensor  # [B, T, action_vocab]
    value_logits: Tensor  # [B, T, value_bins]


def simnorm(x: Tensor, V: int, tau: float) -> Tensor:
    """Partition the last dim into groups of V and softmax each group."""
    D = x.shape[-1]
    if D % V != 0:
        raise ConfigError(f"simnorm: dimension {D} not divisible by group size {V}")
    if tau <= 0:
        raise ConfigError(f"simnorm: tau must be positive, got {tau}")
    grouped = ad.reshape(x, x.shape[:-1] + (D // V, V))
    probs = ad.softmax_lastdim(ad.scale(grouped, 1.0 / tau))
    return ad.reshape(probs, x.shape)


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = ad.parameter(np.ones(dim))
        self.bias = ad.parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)

    def named_parameters(self):
        return [("gain", self.gain), ("bias", self.bias)]


class Mlp:
    """Two-layer GELU MLP."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.w1 = ad.parameter(rng.normal(0.0, 0.02, size=(d_in, d_hidden)))
        self.b1 = ad.parameter(np.zeros(d_hidden))
        self.w2 = ad.parameter(rng.normal(0.0, 0.02, size=(d_hidden, d_out)))
        self.b2 = ad.parameter(np.zeros(d_out))

    def forward(self, x: Tensor) -> Tensor:
        h = ad.gelu(ad.add(ad.matmul(x, self.w1), self.b1))
        return ad.add(ad.matmul(h, self.w2), self.b2)

    def named_parameters(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


class TransformerBlock:
    """Pre-norm residual block: attention then a 4x-wide GELU MLP."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        D = config.embed_dim
        self.ln1 = LayerNorm(D)
        self.attn = MultiHeadAttention(
            D,
            config.num_heads,
            config.kind,
            rng,
            dropout_p=config.dropout_p,
            init_span=config.init_adaptive_span,
            init_mu=config.init_adaptive_mu,
            init_sigma=config.init_adaptive_sigma,
            max_span=config.max_adaptive_span,
            ramp=config.adapt_span_ramp,
        )
        self.ln2 = LayerNorm(D)
        self.mlp = Mlp(D, 4 * D, D, rng)

    def forward(self, x, train=False, rng=None):
        attn_out, weights = self.attn.forward(self.ln1.forward(x), train=train, rng=rng)
        x = ad.add(x, attn_out)
        x = ad.add(x, self.mlp.forward(self.ln2.forward(x)))
        return x, weights

    def named_parameters(self):
        out = [("ln1." + n, p) for n, p in self.ln1.named_parameters()]
        out += [("attn." + n, p) for n, p in self.attn.named_parameters()]
        out += [("ln2." + n, p) for n, p in self.ln2.named_parameters()]
        out += [("mlp." + n, p) for n, p in self.mlp.named_parameters()]
        return out


class WorldModel:
    """Embedding tables, N transformer blocks, dynamics and prediction heads.

    The frozen target codebook provides the SimNorm target simplices for
    next-latent supervision; keeping it non-trainable prevents the latent
    targets from collapsing under latent-only tasks.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        D = config.embed_dim
        self.latent_emb = ad.parameter(
            rng.normal(0.0, 0.02, size=(config.latent_vocab, D))
        )
        self.action_emb = ad.parameter(
            rng.normal(0.0, 0.02, size=(config.action_vocab, D))
        )
        self.pos_emb = ad.parameter(
            rng.normal(0.0, 0.02, size=(config.context_length, D))
        )
        self.target_codebook = rng.normal(0.0, 1.0, size=(config.latent_vocab, D))
        self.blocks = [
            TransformerBlock(config, rng) for _ in range(config.num_layers)
        ]
        self.ln_f = LayerNorm(D)
        self.dyn_latent = Mlp(D, D, D, rng)
        self.dyn_reward = Mlp(D, D, config.reward_bins, rng)
        self.pred_policy = Mlp(D, D, config.action_vocab, rng)
        self.pred_value = Mlp(D, D, config.value_bins, rng)
        self._target_table = self._build_target_table()

    def _build_target_table(self) -> np.ndarray:
        from . import kernels

        V = self.config.simnorm_V
        grouped = (self.target_codebook / self.config.simnorm_tau).reshape(-1, V)
        return kernels.softmax_rows(grouped).reshape(self.target_codebook.shape)

    # -- embedding -------------------------------------------------------------

    def _check_ids(self, ids: np.ndarray, vocab: int, what: str) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise IndexError(f"{what} id out of range [0, {vocab})")
        return ids

    def embed(self, z_ids: np.ndarray, a_ids: np.ndarray) -> Tensor:
        """Fused per-step tokens [B, T, D] for id arrays of shape [B, T]."""
        z_ids = self._check_ids(z_ids, self.config.latent_vocab, "latent")
        a_ids = self._check_ids(a_ids, self.config.action_vocab, "action")
        B, T = z_ids.shape
        if T > self.config.context_length:
            raise ContractError(
                f"sequence length {T} exceeds context length {self.config.context_length}"
            )
        pos = np.broadcast_to(np.arange(T), (B, T))
        tok = ad.add(
            ad.add(
                ad.gather_rows(self.latent_emb, z_ids),
                ad.gather_rows(self.action_emb, a_ids),
            ),
            ad.gather_rows(self.pos_emb, pos),
        )
        return tok

    def embed_step(self, z_id: int, a_id: int, pos: int) -> Tensor:
        """Single fused token [D] (latent + action + positional embedding)."""
        if pos >= self.config.context_length:
            raise ContractError(
                f"pos {pos} exceeds context length {self.config.context_length}"
            )
        self._check_ids(np.array([z_id]), self.config.latent_vocab, "latent")
        self._check_ids(np.array([a_id]), self.config.action_vocab, "action")
        tok = ad.add(
            ad.add(
                ad.gather_rows(self.latent_emb, np.array([z_id])),
                ad.gather_rows(self.action_emb, np.array([a_id])),
            ),
            ad.gather_rows(self.pos_emb, np.array([pos])),
        )
        return ad.reshape(tok, (self.config.embed_dim,))

    # -- forward ---------------------------------------------------------------

    def transformer_forward(
        self, tokens: Tensor, train: bool = False, rng=None
    ) -> tuple[Tensor, list[Tensor]]:
        """Hidden states for every position plus per-layer attention weights."""
        T = tokens.shape[1]
        if T > self.config.context_length:
            raise ContractError(
                f"sequence length {T} exceeds context length {self.config.context_length}"
            )
        x = tokens
        weights = []
        for block in self.blocks:
            x, w = block.forward(x, train=train, rng=rng)
            weights.append(w)
        return self.ln_f.forward(x), weights

    def dynamics_head(self, hidden: Tensor) -> DynamicsOutput:
        latent_logits = self.dyn_latent.forward(hidden)
        latent = simnorm(latent_logits, self.config.simnorm_V, self.config.simnorm_tau)
        reward_logits = self.dyn_reward.forward(hidden)
        return DynamicsOutput(latent_logits, latent, reward_logits)

    def prediction_head(self, hidden: Tensor) -> PredictionOutput:
        return PredictionOutput(
            self.pred_policy.forward(hidden), self.pred_value.forward(hidden)
        )

    def forward(
        self, z_ids: np.ndarray, a_ids: np.ndarray, train: bool = False, rng=None
    ) -> tuple[DynamicsOutput, list[Tensor]]:
        hidden, weights = self.transformer_forward(
            self.embed(z_ids, a_ids), train=train, rng=rng
        )
        return self.dynamics_head(hidden), weights

    def target_simplices(self, target_ids: np.ndarray) -> np.ndarray:
        """SimNorm simplices of the frozen codebook rows (constants)."""
        ids = self._check_ids(target_ids, self.config.latent_vocab, "target")
        return self._target_table[ids]

    # -- parameter plumbing ------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [
            ("latent_emb", self.latent_emb),
            ("action_emb", self.action_emb),
            ("pos_emb", self.pos_emb),
        ]
        for i, block in enumerate(self.blocks):
            out += [(f"block{i}.{n}", p) for n, p in block.named_parameters()]
        out += [("ln_f." + n, p) for n, p in self.ln_f.named_parameters()]
        out += [("dyn_latent." + n, p) for n, p in self.dyn_latent.named_parameters()]
        out += [("dyn_reward." + n, p) for n, p in self.dyn_reward.named_parameters()]
        out += [("pred_policy." + n, p) for n, p in self.pred_policy.named_parameters()]
        out += [("pred_value." + n, p) for n, p in self.pred_value.named_parameters()]
        return out

    def prior_params(self):
        """Per-layer PriorParams objects (empty list of tensors for causal)."""
        return [block.attn.priors for block in self.blocks]

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def num_params(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def prior_snapshot(self) -> list[dict[str, np.ndarray]]:
        return [pr.snapshot() for pr in self.prior_params()]


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(model: WorldModel, path) -> None:
    """Write config echo plus flat named parameter arrays (bit-exact)."""
    arrays = {f"param:{name}": p.data for name, p in model.named_parameters()}
    arrays["buffer:target_codebook"] = model.target_codebook
    np.savez(
        path,
        __meta__=np.array(
            json.dumps(
                {"version": CHECKPOINT_VERSION, "config": model.config.to_dict()}
            )
        ),
        **arrays,
    )


def load_checkpoint(path) -> WorldModel:
    with np.load(path, allow_pickle=False) as blob:
        meta = json.loads(str(blob["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta.get('version')}")
        config = ModelConfig.from_dict(meta["config"])
        model = WorldModel(config, seed=0)
        model.target_codebook = blob["buffer:target_codebook"].copy()
        model._target_table = model._build_target_table()
        for name, p in model.named_parameters():
            key = f"param:{name}"
            if key not in blob:
                raise ConfigError(f"checkpoint missing parameter {name}")
            p.data = blob[key].astype(np.float64).copy()
            p.zero_grad()
    return model
