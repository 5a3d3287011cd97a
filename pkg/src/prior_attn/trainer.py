"""Supervised training of the dynamics head on synthetic trajectories.

Loss = 10 * next-latent cross-entropy + 1 * reward cross-entropy + span
penalty, optimized with AdamW (decoupled weight decay, excluded for prior
parameters and normalization gains/biases) under a global gradient-norm
clip of 5. Everything is deterministic given (config, task, steps, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .biases import AttentionKind
from .errors import ConfigError, NumericError
from .model import DynamicsOutput, ModelConfig, WorldModel
from .regularization import SpanPenalty, maxnorm_project, span_penalty_term
from .tasks import Dataset, TaskSpec, TrajectoryBatch, content_hash, generate, make_batches

REWARD_CLASS_OFFSET = 1  # reward value r in {-1, 0, +1} -> class index r + 1


@dataclass
class LossBreakdown:
    """Scalar loss terms as graph tensors; total carries the 10/1 weighting."""

    latent_loss: Tensor
    reward_loss: Tensor
    span_penalty: Tensor
    total: Tensor

    def floats(self) -> dict[str, float]:
        return {
            "latent_loss": self.latent_loss.item(),
            "reward_loss": self.reward_loss.item(),
            "span_penalty": self.span_penalty.item(),
            "total": self.total.item(),
        }


def reward_to_class(rewards: np.ndarray) -> np.ndarray:
    return rewards + REWARD_CLASS_OFFSET


def compute_loss(
    model: WorldModel,
    outputs: DynamicsOutput,
    batch: TrajectoryBatch,
    penalty: SpanPenalty,
) -> LossBreakdown:
    cfg = model.config
    if cfg.reward_bins < 3:
        raise ConfigError("training needs reward_bins >= 3 for rewards in {-1, 0, +1}")
    B, T = batch.tokens.shape

    # next-latent term: cross-entropy against frozen-codebook simplices,
    # averaged over batch, positions and SimNorm groups
    V = cfg.simnorm_V
    groups = cfg.embed_dim // V
    target = model.target_simplices(batch.targets).reshape(B, T, groups, V)
    grouped = ad.reshape(outputs.latent_logits, (B, T, groups, V))
    log_probs = ad.log_softmax_lastdim(ad.scale(grouped, 1.0 / cfg.simnorm_tau))
    latent_loss = ad.reduce_mean(
        ad.negate(ad.reduce_sum(ad.mul(log_probs, Tensor(target)), axis=-1))
    )

    # reward term: 3-class cross-entropy on {-1, 0, +1}
    classes = reward_to_class(batch.rewards)
    one_hot = np.zeros((B, T, cfg.reward_bins))
    np.put_along_axis(one_hot, classes[..., None], 1.0, axis=-1)
    reward_lsm = ad.log_softmax_lastdim(outputs.reward_logits)
    reward_loss = ad.reduce_mean(
        ad.negate(ad.reduce_sum(ad.mul(reward_lsm, Tensor(one_hot)), axis=-1))
    )

    penalty_term = span_penalty_term(model.prior_params(), penalty)
    total = ad.add(
        ad.add(
            ad.scale(latent_loss, cfg.latent_loss_coef),
            ad.scale(reward_loss, cfg.reward_loss_coef),
        ),
        penalty_term,
    )
    return LossBreakdown(latent_loss, reward_loss, penalty_term, total)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def exclude_from_decay(name: str) -> bool:
    """Prior parameters and normalization gains/biases skip weight decay."""
    return "prior." in name or "ln1." in name or "ln2." in name or name.startswith("ln_f.")


class AdamW:
    """AdamW with bias-corrected moments and decoupled weight decay."""

    def __init__(
        self,
        named_params: list[tuple[str, Tensor]],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        self.named_params = named_params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.state = {
            name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            for name, p in named_params
        }

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.named_params:
            g = p.grad
            if np.isnan(g).any():
                raise NumericError(f"NaN gradient in parameter {name!r}")
            st = self.state[name]
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * (g * g)
            m_hat = st["m"] / bc1
            v_hat = st["v"] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay and not exclude_from_decay(name):
                p.data -= self.lr * self.weight_decay * p.data


def clip_gradients(named_params, max_norm: float = 5.0) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = 0.0
    for _, p in named_params:
        g = p.grad
        total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for _, p in named_params:
        p.grad *= factor
    return factor


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _sequential_batches(dataset: Dataset, H: int, batch_size: int) -> list[TrajectoryBatch]:
    n = dataset.inputs.shape[0]
    out = []
    for i in range(0, n, batch_size):
        sl = slice(i, i + batch_size)
        out.append(
            TrajectoryBatch(
                dataset.inputs[sl, :H],
                dataset.actions[sl, :H],
                dataset.rewards[sl, :H],
                dataset.targets[sl, :H],
            )
        )
    return out


def evaluate(model: WorldModel, dataset: Dataset, batch_size: int = 256) -> dict:
    """Deterministic metrics with dropout disabled.

    The attention mass profile is the mean final-query attention weight per
    relative offset d (the final query is the one position that can reach
    every offset), shape [layers, heads, T]; each (layer, head) row sums
    to 1.
    """
    cfg = model.config
    H = cfg.context_length
    total, correct = 0, 0
    cue_total, cue_correct = 0, 0
    latent_sum, latent_batches = 0.0, 0
    profile_sum: Optional[np.ndarray] = None
    label_counts = np.zeros(3, dtype=np.int64)
    penalty = SpanPenalty("none")

    with ad.no_grad():
        for batch in _sequential_batches(dataset, H, batch_size):
            outputs, weights = model.forward(batch.tokens, batch.actions, train=False)
            losses = compute_loss(model, outputs, batch, penalty)
            latent_sum += losses.latent_loss.item()
            latent_batches += 1

            pred = np.argmax(outputs.reward_logits.data, axis=-1)
            truth = reward_to_class(batch.rewards)
            total += truth.size
            correct += int((pred == truth).sum())
            nonzero = batch.rewards != 0
            cue_total += int(nonzero.sum())
            cue_correct += int((pred[nonzero] == truth[nonzero]).sum())
            for c in range(3):
                label_counts[c] += int((truth == c).sum())

            B = batch.tokens.shape[0]
            final_rows = np.stack(
                [w.data[:, :, -1, ::-1] for w in weights], axis=0
            )  # [N, B, h, T], columns re-indexed as offsets
            batch_profile = final_rows.sum(axis=1)
            profile_sum = (
                batch_profile if profile_sum is None else profile_sum + batch_profile
            )

    n_episodes = dataset.inputs.shape[0]
    return {
        "reward_accuracy": correct / total,
        "cue_accuracy": cue_correct / cue_total if cue_total else float("nan"),
        "latent_loss": latent_sum / latent_batches,
        "profile": profile_sum / n_episodes,
        "label_freq": label_counts / label_counts.sum(),
    }


# ---------------------------------------------------------------------------
# training run
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    """Everything a run produced: per-step losses, eval metrics, prior snapshots."""

    config: ModelConfig
    task: TaskSpec
    seed: int
    steps: int
    dataset_hash: str
    losses: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    prior_snapshots: list[dict] = field(default_factory=list)
    failed: bool = False

    @property
    def final_accuracy(self) -> float:
        return self.evals[-1]["reward_accuracy"] if self.evals else float("nan")


def _span_gradient_expected(prior, T: int) -> bool:
    """True when some head's ramp region overlaps visible integer offsets."""
    with ad.no_grad():
        spans = prior.span().data
    d = np.arange(1, T)
    return any(np.any((d > L) & (d < L + prior.ramp)) for L in spans)


def _check_prior_reachability(model: WorldModel, T: int) -> None:
    kind = model.config.kind
    for i, prior in enumerate(model.prior_params()):
        if prior.mu is not None and not np.any(prior.mu.grad):
            raise RuntimeError(f"layer {i}: Gaussian mean received no gradient")
        if prior.raw_sigma is not None and not np.any(prior.raw_sigma.grad):
            raise RuntimeError(f"layer {i}: Gaussian width received no gradient")
        if (
            prior.raw_span is not None
            and _span_gradient_expected(prior, T)
            and not np.any(prior.raw_span.grad)
        ):
            raise RuntimeError(f"layer {i}: span received no gradient")
    del kind


def train_run(
    config: ModelConfig,
    task: TaskSpec,
    steps: int,
    seed: int,
    batch_size: int = 64,
    learning_rate: float = 1e-4,
    weight_decay: float = 1e-4,
    max_grad_norm: float = 5.0,
    eval_every: int = 200,
    train_episodes: int = 128,
    eval_episodes: int = 256,
) -> TrainReport:
    """Train the dynamics head; deterministic given all arguments."""
    ss = np.random.SeedSequence(seed)
    model_seed, dropout_seed, data_seed, eval_seed, order_seed = (
        int(s) for s in ss.generate_state(5)
    )

    train_set = generate(replace(task, num_episodes=train_episodes, seed=data_seed))
    eval_set = generate(replace(task, num_episodes=eval_episodes, seed=eval_seed))
    if task.latent_vocab != config.latent_vocab or task.action_vocab != config.action_vocab:
        raise ConfigError("task and model vocabulary sizes disagree")

    model = WorldModel(config, seed=model_seed)
    params = model.named_parameters()
    opt = AdamW(
        params, lr=learning_rate, weight_decay=weight_decay
    )
    penalty = SpanPenalty(
        config.span_penalty, config.adapt_span_loss, config.maxnorm_c
    )
    dropout_rng = np.random.default_rng(dropout_seed)
    H = config.context_length

    report = TrainReport(
        config=config,
        task=task,
        seed=seed,
        steps=steps,
        dataset_hash=content_hash(train_set),
    )
    report.prior_snapshots.append({"step": 0, "layers": model.prior_snapshot()})

    def run_eval(step: int) -> None:
        metrics = evaluate(model, eval_set)
        metrics["step"] = step
        report.evals.append(metrics)
        report.prior_snapshots.append({"step": step, "layers": model.prior_snapshot()})

    batches: list[TrajectoryBatch] = []
    cursor = 0
    epoch = 0
    for step in range(1, steps + 1):
        if cursor >= len(batches):
            batches = make_batches(train_set, H, batch_size, seed=order_seed + epoch)
            cursor = 0
            epoch += 1
        batch = batches[cursor]
        cursor += 1

        try:
            outputs, _ = model.forward(
                batch.tokens, batch.actions, train=True, rng=dropout_rng
            )
            losses = compute_loss(model, outputs, batch, penalty)
        except NumericError:
            # diverged parameters surface as NaN inside the forward pass
            report.failed = True
            break
        record = losses.floats()
        record["step"] = step
        report.losses.append(record)
        if not np.isfinite(record["total"]):
            report.failed = True
            break

        model.zero_grad()
        ad.backward(losses.total)
        _check_prior_reachability(model, H)
        clip_gradients(params, max_grad_norm)
        try:
            opt.step()
        except NumericError:
            report.failed = True
            break
        if penalty.kind == "maxnorm":
            maxnorm_project(model.prior_params(), penalty.cap)

        if eval_every > 0 and step % eval_every == 0:
            run_eval(step)

    if not report.failed and steps > 0 and (not report.evals or report.evals[-1]["step"] != steps):
        run_eval(steps)
    return report
