"""Command-line front end: train / sweep / ablate-reg / ablate-init / overhead / report.

Configuration is a plain-text key=value file; command-line flags override
file values, which override defaults. Attention-prior flags use the
published names (init_adaptive_mu, adapt_span_ramp, ...). Exit codes:
0 success, 1 config error, 2 divergence in every seed, 3 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import ModelConfig
from .reports import (
    PENALTY_COLORS,
    dump_learned_priors,
    emit_curves,
    overhead_report,
    record_from_dir,
    record_from_report,
    run_sweep,
    write_csv,
)
from .tasks import TaskSpec
from .trainer import train_run


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"seeds must be integers, got {text!r}")


def _opt_float(text: str):
    if text in ("none", "None", ""):
        return None
    return float(text)


# key -> (section, converter)
KEYS: dict[str, tuple[str, object]] = {
    # model / architecture
    "embed_dim": ("model", int),
    "num_layers": ("model", int),
    "num_heads": ("model", int),
    "context_length": ("model", int),
    "attention_type": ("model", str),
    "init_adaptive_span": ("model", _opt_float),
    "init_adaptive_mu": ("model", float),
    "init_adaptive_sigma": ("model", float),
    "max_adaptive_span": ("model", float),
    "adapt_span_ramp": ("model", float),
    "adapt_span_loss": ("model", float),
    "span_penalty": ("model", str),
    "maxnorm_c": ("model", float),
    "reward_bins": ("model", int),
    "value_bins": ("model", int),
    "simnorm_V": ("model", int),
    "simnorm_tau": ("model", float),
    "latent_vocab": ("model", int),
    "action_vocab": ("model", int),
    "dropout_p": ("model", float),
    "latent_loss_coef": ("model", float),
    "reward_loss_coef": ("model", float),
    # task
    "task": ("task", str),
    "seq_len": ("task", int),
    "k": ("task", int),
    "corridor_max": ("task", int),
    "task_seed": ("task", int),
    # trainer
    "steps": ("trainer", int),
    "batch_size": ("trainer", int),
    "learning_rate": ("trainer", float),
    "weight_decay": ("trainer", float),
    "max_grad_norm": ("trainer", float),
    "eval_every": ("trainer", int),
    "train_episodes": ("trainer", int),
    "eval_episodes": ("trainer", int),
    # driver
    "seeds": ("driver", _parse_seeds),
    "out": ("driver", str),
}

TRAINER_DEFAULTS = {
    "steps": 2000,
    "batch_size": 64,
    "learning_rate": 1e-4,
    "weight_decay": 1e-4,
    "max_grad_norm": 5.0,
    "eval_every": 200,
    "train_episodes": 128,
    "eval_episodes": 256,
}
TASK_DEFAULTS = {"task": "delayed_cue", "seq_len": 10, "k": 6, "corridor_max": 6, "task_seed": 0}
DRIVER_DEFAULTS = {"seeds": (1, 2, 3, 4, 5), "out": "runs"}


@dataclass
class RunConfig:
    model: ModelConfig
    task: TaskSpec
    steps: int
    batch_size: int
    learning_rate: float
    weight_decay: float
    max_grad_norm: float
    eval_every: int
    train_episodes: int
    eval_episodes: int
    seeds: tuple[int, ...]
    out: str

    def train_kwargs(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "max_grad_norm": self.max_grad_norm,
            "eval_every": self.eval_every,
            "train_episodes": self.train_episodes,
            "eval_episodes": self.eval_episodes,
        }


def read_config_file(path) -> dict[str, str]:
    """Parse 'key = value' lines; '#' starts a comment."""
    raw: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        raw[key] = value
    return raw


def parse_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults <- config file <- overrides; unknown keys are rejected."""
    merged: dict[str, str] = {}
    if path is not None:
        merged.update(read_config_file(path))
    merged.update(overrides or {})

    sections: dict[str, dict] = {"model": {}, "task": {}, "trainer": {}, "driver": {}}
    for key, value in merged.items():
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        section, conv = KEYS[key]
        try:
            sections[section][key] = conv(value) if isinstance(value, str) else value
        except ConfigError:
            raise
        except (TypeError, ValueError):
            raise ConfigError(f"malformed value for {key!r}: {value!r}")

    model = ModelConfig(**sections["model"])

    task_kw = dict(TASK_DEFAULTS)
    task_kw.update(sections["task"])
    task = TaskSpec(
        kind=task_kw["task"],
        seq_len=task_kw["seq_len"],
        k=task_kw["k"],
        corridor_max=task_kw["corridor_max"],
        latent_vocab=model.latent_vocab,
        action_vocab=model.action_vocab,
        seed=task_kw["task_seed"],
    )

    trainer_kw = dict(TRAINER_DEFAULTS)
    trainer_kw.update(sections["trainer"])
    driver_kw = dict(DRIVER_DEFAULTS)
    driver_kw.update(sections["driver"])
    return RunConfig(model=model, task=task, **trainer_kw, **driver_kw)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _collect_overrides(args: argparse.Namespace) -> dict[str, str]:
    return {
        key: getattr(args, f"opt_{key}")
        for key in KEYS
        if getattr(args, f"opt_{key}", None) is not None
    }


def cmd_train(args) -> int:
    rc = parse_config(args.config, _collect_overrides(args))
    seed = args.seed if args.seed is not None else rc.seeds[0]
    report = train_run(rc.model, rc.task, rc.steps, seed, **rc.train_kwargs())
    from .reports import save_run

    out = Path(rc.out)
    save_run(report, out / f"run_seed{seed}")
    if report.failed:
        at = report.losses[-1]["step"] if report.losses else 1
        print(f"run diverged at step {at}", file=sys.stderr)
        return 2
    print(f"seed {seed}: final accuracy {report.final_accuracy:.4f} -> {out}")
    return 0


def cmd_sweep(args) -> int:
    rc = parse_config(args.config, _collect_overrides(args))
    summary, reports = run_sweep(
        rc.model, rc.task, rc.steps, rc.seeds, rc.out, **rc.train_kwargs()
    )
    records = [record_from_report(r) for r in reports]
    out = Path(rc.out)
    emit_curves({summary.variant: records}, out / "curves.csv", out / "curves.svg")
    dump_learned_priors(records, out)
    print(
        f"{summary.variant}: final {summary.final_mean:.4f} +/- {summary.final_stderr:.4f} "
        f"over seeds {list(rc.seeds)} -> {out}"
    )
    if len(summary.failed_seeds) == len(rc.seeds):
        return 2
    return 0


def cmd_ablate_reg(args) -> int:
    """Span-penalty ablation: {none, l1, l2, maxnorm} x tasks, adaptive spans."""
    rc = parse_config(args.config, _collect_overrides(args))
    penalties = args.penalties.split(",")
    tasks = args.tasks.split(",")
    out = Path(rc.out)
    summary_rows = []
    any_ok = False
    for kind in tasks:
        task = replace(rc.task, kind=kind)
        records_by_penalty = {}
        for pen in penalties:
            model = replace(
                rc.model,
                attention_type="adaptive",
                span_penalty=pen,
                init_adaptive_span=rc.model.init_adaptive_span,
            )
            sub = out / f"{kind}_{pen}"
            _, reports = run_sweep(
                model, task, rc.steps, rc.seeds, sub, **rc.train_kwargs()
            )
            records = [record_from_report(r) for r in reports]
            records_by_penalty[pen] = records
            ok = [r for r in records if not r.failed]
            any_ok = any_ok or bool(ok)
            finals = [r.final_accuracy for r in ok]
            spans = [r.mean_final_span for r in ok]
            summary_rows.append(
                (
                    kind,
                    pen,
                    float(np.mean(finals)) if finals else float("nan"),
                    float(np.mean(spans)) if spans else float("nan"),
                )
            )
        emit_curves(
            records_by_penalty,
            out / f"curves_{kind}.csv",
            out / f"curves_{kind}.svg",
            colors=PENALTY_COLORS,
        )
    write_csv(
        out / "reg_ablation_summary.csv",
        ["task", "penalty", "final_accuracy_mean", "final_mean_span"],
        summary_rows,
    )
    print(f"regularization ablation -> {out}")
    return 0 if any_ok else 2


INIT_GRID = (
    ("adaptive", "init_adaptive_span", (2.0, 6.0, 10.0)),
    ("gaussian", "init_adaptive_mu", (2.0, 6.0, 10.0)),
    ("gaussian", "init_adaptive_sigma", (1.0, 3.0)),
)


def cmd_ablate_init(args) -> int:
    """Initialization sensitivity grid: spans {2,6,10}, mu {2,6,10}, sigma {1,3}."""
    rc = parse_config(args.config, _collect_overrides(args))
    out = Path(rc.out)
    rows = []
    any_ok = False
    for variant, key, values in INIT_GRID:
        for value in values:
            model = replace(rc.model, attention_type=variant, **{key: value})
            sub = out / f"{variant}_{key}_{value:g}"
            summary, reports = run_sweep(
                model, rc.task, rc.steps, rc.seeds, sub, **rc.train_kwargs()
            )
            ok = [r for r in reports if not r.failed]
            any_ok = any_ok or bool(ok)
            rows.append(
                (variant, key, value, summary.final_mean, summary.final_stderr)
            )
    write_csv(
        out / "init_ablation_summary.csv",
        ["variant", "key", "value", "final_accuracy_mean", "final_accuracy_stderr"],
        rows,
    )
    print(f"initialization ablation -> {out}")
    return 0 if any_ok else 2


def cmd_overhead(args) -> int:
    rc = parse_config(args.config, _collect_overrides(args))
    out_csv = None
    if args.out_csv:
        out_csv = Path(args.out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
    table = overhead_report(rc.model, args.T, out_csv=out_csv)
    print(table)
    return 0


def cmd_report(args) -> int:
    run_dirs = [Path(p) for p in args.runs]
    records = [record_from_dir(d) for d in run_dirs]
    by_variant: dict[str, list] = {}
    for rec in records:
        by_variant.setdefault(rec.variant, []).append(rec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emit_curves(by_variant, out / "curves.csv", out / "curves.svg")
    for variant, recs in by_variant.items():
        dump_learned_priors(recs, out, prefix=f"priors_{variant}")
    print(f"report -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prior-attn",
        description="Train and analyze attention-prior world models on synthetic memory tasks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None, help="key=value config file")
        for key in KEYS:
            p.add_argument(f"--{key}", dest=f"opt_{key}", default=None, metavar="V")

    p_train = sub.add_parser("train", help="single training run")
    add_common(p_train)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.set_defaults(fn=cmd_train)

    p_sweep = sub.add_parser("sweep", help="multi-seed sweep with aggregate curves")
    add_common(p_sweep)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_reg = sub.add_parser("ablate-reg", help="span-penalty ablation matrix")
    add_common(p_reg)
    p_reg.add_argument("--penalties", default="none,l1,l2,maxnorm")
    p_reg.add_argument("--tasks", default="delayed_cue,copy")
    p_reg.set_defaults(fn=cmd_ablate_reg)

    p_init = sub.add_parser("ablate-init", help="prior initialization sensitivity grid")
    add_common(p_init)
    p_init.set_defaults(fn=cmd_ablate_init)

    p_over = sub.add_parser("overhead", help="parameter/FLOP overhead table")
    add_common(p_over)
    p_over.add_argument("--T", type=int, default=20, help="sequence length for FLOP counting")
    p_over.add_argument("--out-csv", default=None)
    p_over.set_defaults(fn=cmd_overhead)

    p_rep = sub.add_parser("report", help="regenerate figures from saved run directories")
    p_rep.add_argument("--runs", nargs="+", required=True)
    p_rep.add_argument("--out", required=True)
    p_rep.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
