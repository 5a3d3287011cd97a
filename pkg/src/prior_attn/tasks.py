"""Deterministic partially observable sequence tasks with known memory horizons.

Three families:

* delayed_cue -- reward at step t is decided solely by the token seen k
  steps earlier (zero before the first k steps), so exactly the last k+1
  steps are sufficient for reward prediction.
* copy -- the next-latent target at step t is the token from k steps back
  (clamped at the episode start); pure latent supervision, all rewards 0.
* tmaze -- an initial cue token, a corridor of uninformative filler with
  per-episode random length, and a decision step whose reward depends only
  on (cue side, decision action); the required memory span varies per
  episode.

Episodes for delayed_cue and tmaze carry seq_len + 1 tokens so that
next-latent targets are the literal next token; the model consumes the
first seq_len. All generators are pure functions of (spec, seed).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, DimensionError

TASK_KINDS = ("delayed_cue", "copy", "tmaze")
TMAZE_CUE_TOKENS = (0, 1)  # token ids encoding the goal side


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "delayed_cue"
    seq_len: int = 10
    k: int = 6  # cue offset for delayed_cue / copy
    corridor_max: int = 6  # tmaze only
    latent_vocab: int = 16
    action_vocab: int = 4
    num_episodes: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; valid: {TASK_KINDS}")
        if self.seq_len < 1:
            raise ConfigError("seq_len must be >= 1")
        if self.kind == "delayed_cue":
            if not 1 <= self.k < self.seq_len:
                raise ConfigError(
                    f"delayed_cue needs 1 <= k < seq_len, got k={self.k}, seq_len={self.seq_len}"
                )
            if self.latent_vocab % 2 != 0:
                raise ConfigError("delayed_cue needs an even latent vocabulary")
        if self.kind == "copy" and not 0 <= self.k < self.seq_len:
            raise ConfigError(f"copy needs 0 <= k < seq_len, got k={self.k}")
        if self.kind == "tmaze":
            if self.corridor_max < 1:
                raise ConfigError("tmaze corridor_max must be >= 1")
            if self.seq_len < self.corridor_max + 2:
                raise ConfigError(
                    "tmaze needs seq_len >= corridor_max + 2 "
                    f"(got seq_len={self.seq_len}, corridor_max={self.corridor_max})"
                )
            if self.latent_vocab < 3:
                raise ConfigError("tmaze needs at least 3 latent tokens")


@dataclass
class Dataset:
    """Generated episodes: inputs/actions/rewards plus next-latent targets."""

    spec: TaskSpec
    tokens: np.ndarray  # [n, seq_len] or [n, seq_len + 1]
    actions: np.ndarray  # [n, seq_len]
    rewards: np.ndarray  # [n, seq_len], values in {-1, 0, +1}
    targets: np.ndarray  # [n, seq_len]

    @property
    def inputs(self) -> np.ndarray:
        return self.tokens[:, : self.spec.seq_len]


@dataclass
class TrajectoryBatch:
    """Context windows of length H: one fused (latent, action) step per column."""

    tokens: np.ndarray  # [B, H]
    actions: np.ndarray  # [B, H]
    rewards: np.ndarray  # [B, H]
    targets: np.ndarray  # [B, H]


def cue_side(token_ids: np.ndarray, latent_vocab: int) -> np.ndarray:
    """1 for tokens in the designated cue half of the vocabulary, else 0."""
    return (token_ids < latent_vocab // 2).astype(np.int64)


def gen_delayed_cue(spec: TaskSpec) -> Dataset:
    if spec.kind != "delayed_cue":
        raise ConfigError(f"spec kind is {spec.kind!r}, expected delayed_cue")
    rng = np.random.default_rng(spec.seed)
    n, L, k = spec.num_episodes, spec.seq_len, spec.k
    tokens = rng.integers(0, spec.latent_vocab, size=(n, L + 1))
    actions = rng.integers(0, spec.action_vocab, size=(n, L))
    rewards = np.zeros((n, L), dtype=np.int64)
    sides = cue_side(tokens[:, : L - k], spec.latent_vocab)
    rewards[:, k:] = np.where(sides == 1, 1, -1)
    return Dataset(spec, tokens, actions, rewards, tokens[:, 1:].copy())


def gen_copy_task(spec: TaskSpec) -> Dataset:
    if spec.kind != "copy":
        raise ConfigError(f"spec kind is {spec.kind!r}, expected copy")
    rng = np.random.default_rng(spec.seed)
    n, L, k = spec.num_episodes, spec.seq_len, spec.k
    tokens = rng.integers(0, spec.latent_vocab, size=(n, L))
    actions = rng.integers(0, spec.action_vocab, size=(n, L))
    rewards = np.zeros((n, L), dtype=np.int64)
    src = np.maximum(np.arange(L) - k, 0)  # clamp before the first k steps
    return Dataset(spec, tokens, actions, rewards, tokens[:, src].copy())


def gen_tmaze(spec: TaskSpec) -> Dataset:
    if spec.kind != "tmaze":
        raise ConfigError(f"spec kind is {spec.kind!r}, expected tmaze")
    rng = np.random.default_rng(spec.seed)
    n, L = spec.num_episodes, spec.seq_len
    filler = rng.integers(2, spec.latent_vocab, size=(n, L + 1))
    sides = rng.integers(0, 2, size=n)
    corridors = rng.integers(1, spec.corridor_max + 1, size=n)
    actions = rng.integers(0, spec.action_vocab, size=(n, L))

    tokens = filler
    tokens[:, 0] = np.where(sides == 1, TMAZE_CUE_TOKENS[1], TMAZE_CUE_TOKENS[0])
    rewards = np.zeros((n, L), dtype=np.int64)
    dec = corridors + 1  # decision position, in [2, corridor_max + 1]
    match = (actions[np.arange(n), dec] % 2) == sides
    rewards[np.arange(n), dec] = np.where(match, 1, -1)
    return Dataset(spec, tokens, actions, rewards, tokens[:, 1:].copy())


GENERATORS = {"delayed_cue": gen_delayed_cue, "copy": gen_copy_task, "tmaze": gen_tmaze}


def generate(spec: TaskSpec) -> Dataset:
    return GENERATORS[spec.kind](spec)


def make_batches(
    dataset: Dataset, H: int, batch_size: int, seed: int
) -> list[TrajectoryBatch]:
    """Contiguous windows of length H, deterministically shuffled and batched.

    Windows tile each episode without gaps; a trailing remainder shorter
    than H is dropped, as are windows beyond the last full batch.
    """
    L = dataset.spec.seq_len
    if H > L:
        raise DimensionError(f"window H={H} exceeds episode length {L}")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    starts = np.arange(0, L - H + 1, H)
    inputs = dataset.inputs
    windows = []
    for s in starts:
        sl = slice(s, s + H)
        windows.append(
            (inputs[:, sl], dataset.actions[:, sl], dataset.rewards[:, sl], dataset.targets[:, sl])
        )
    tok = np.concatenate([w[0] for w in windows], axis=0)
    act = np.concatenate([w[1] for w in windows], axis=0)
    rew = np.concatenate([w[2] for w in windows], axis=0)
    tgt = np.concatenate([w[3] for w in windows], axis=0)

    order = np.random.default_rng(seed).permutation(tok.shape[0])
    batches = []
    for i in range(0, len(order) - batch_size + 1, batch_size):
        pick = order[i : i + batch_size]
        batches.append(
            TrajectoryBatch(tok[pick].copy(), act[pick].copy(), rew[pick].copy(), tgt[pick].copy())
        )
    return batches


# ---------------------------------------------------------------------------
# dump / load (line-based text format for cross-implementation comparison)
# ---------------------------------------------------------------------------


def _spec_header(spec: TaskSpec) -> str:
    return (
        "# prior-attn v1 dataset "
        f"kind={spec.kind} seq_len={spec.seq_len} k={spec.k} "
        f"corridor_max={spec.corridor_max} latent_vocab={spec.latent_vocab} "
        f"action_vocab={spec.action_vocab} num_episodes={spec.num_episodes} "
        f"seed={spec.seed}"
    )


def dump_text(dataset: Dataset) -> str:
    """One episode per line: 'tokens | actions | rewards'.

    Targets are not stored; they are reconstructed from the tokens by the
    task rule on load.
    """
    lines = [_spec_header(dataset.spec)]
    for toks, acts, rews in zip(dataset.tokens, dataset.actions, dataset.rewards):
        lines.append(
            " ".join(map(str, toks))
            + " | "
            + " ".join(map(str, acts))
            + " | "
            + " ".join(map(str, rews))
        )
    return "\n".join(lines) + "\n"


def dump(dataset: Dataset, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_text(dataset))


def load(path) -> Dataset:
    with open(path) as fh:
        header = fh.readline().strip()
        prefix = "# prior-attn v1 dataset "
        if not header.startswith(prefix):
            raise ConfigError(f"not a prior-attn dataset file: {path}")
        kv = dict(item.split("=", 1) for item in header[len(prefix) :].split())
        spec = TaskSpec(
            kind=kv["kind"],
            seq_len=int(kv["seq_len"]),
            k=int(kv["k"]),
            corridor_max=int(kv["corridor_max"]),
            latent_vocab=int(kv["latent_vocab"]),
            action_vocab=int(kv["action_vocab"]),
            num_episodes=int(kv["num_episodes"]),
            seed=int(kv["seed"]),
        )
        tokens, actions, rewards = [], [], []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            t, a, r = (part.split() for part in line.split("|"))
            tokens.append([int(v) for v in t])
            actions.append([int(v) for v in a])
            rewards.append([int(v) for v in r])
    toks = np.asarray(tokens, dtype=np.int64)
    acts = np.asarray(actions, dtype=np.int64)
    rews = np.asarray(rewards, dtype=np.int64)

    if spec.kind == "copy":
        src = np.maximum(np.arange(spec.seq_len) - spec.k, 0)
        targets = toks[:, src].copy()
    else:
        targets = toks[:, 1:].copy()
    return Dataset(spec, toks, acts, rews, targets)


def content_hash(dataset: Dataset) -> str:
    """sha256 of the canonical text dump."""
    return hashlib.sha256(dump_text(dataset).encode()).hexdigest()
