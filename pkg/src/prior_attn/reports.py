"""Run persistence, sweep aggregation and figure emission.

Every CSV starts with the schema comment line `# prior-attn v1` and is
readable by this module's own loaders. Plots are static SVGs rendered
with a fixed hash salt and no timestamp metadata, so regenerating from
the same inputs is byte-identical.
"""

from __future__ import annotations

import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import ConfigError
from .model import ModelConfig
from .tasks import TaskSpec
from .trainer import TrainReport, train_run

SCHEMA_LINE = "# prior-attn v1"
plt.rcParams["svg.hashsalt"] = "prior-attn"

VARIANT_COLORS = {
    "causal": "#7f7f7f",
    "adaptive": "#ff7f0e",
    "gaussian": "#1f77b4",
    "gaam": "#2ca02c",
}
PENALTY_COLORS = {
    "none": "#7f7f7f",
    "l1": "#1f77b4",
    "l2": "#ff7f0e",
    "maxnorm": "#2ca02c",
}


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Sequence[Sequence], comments=()) -> None:
    lines = [SCHEMA_LINE]
    lines.extend(f"# {c}" for c in comments)
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path) -> tuple[list[str], list[dict[str, str]]]:
    """Returns (comment lines, rows as string dicts); verifies the schema line."""
    text = Path(path).read_text().splitlines()
    if not text or text[0] != SCHEMA_LINE:
        raise ConfigError(f"{path}: missing schema line {SCHEMA_LINE!r}")
    comments, header, rows = [], None, []
    for line in text[1:]:
        if line.startswith("#"):
            comments.append(line[2:] if line.startswith("# ") else line[1:])
            continue
        if header is None:
            header = line.split(",")
            continue
        if line:
            rows.append(dict(zip(header, line.split(","))))
    return comments, rows


def _savefig(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# per-run persistence
# ---------------------------------------------------------------------------


def save_run(report: TrainReport, run_dir) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    write_csv(
        run_dir / "losses.csv",
        ["step", "latent_loss", "reward_loss", "span_penalty", "total"],
        [
            (r["step"], r["latent_loss"], r["reward_loss"], r["span_penalty"], r["total"])
            for r in report.losses
        ],
    )
    write_csv(
        run_dir / "evals.csv",
        ["step", "reward_accuracy", "cue_accuracy", "latent_loss"],
        [
            (r["step"], r["reward_accuracy"], r["cue_accuracy"], r["latent_loss"])
            for r in report.evals
        ],
    )
    prior_rows = []
    for snap in report.prior_snapshots:
        for layer, values in enumerate(snap["layers"]):
            for param, arr in values.items():
                for head, v in enumerate(arr):
                    prior_rows.append((snap["step"], layer, head, param, float(v)))
    write_csv(
        run_dir / "priors.csv", ["step", "layer", "head", "param", "value"], prior_rows
    )
    if report.evals:
        profile = np.asarray(report.evals[-1]["profile"])
        rows = [
            (l, h, d, float(profile[l, h, d]))
            for l in range(profile.shape[0])
            for h in range(profile.shape[1])
            for d in range(profile.shape[2])
        ]
        write_csv(run_dir / "profile.csv", ["layer", "head", "offset", "mass"], rows)

    manifest = {
        "config": report.config.to_dict(),
        "task": asdict(report.task),
        "seed": report.seed,
        "steps": report.steps,
        "dataset_hash": report.dataset_hash,
        "failed": report.failed,
        "final_accuracy": report.final_accuracy,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


@dataclass
class RunRecord:
    """The slice of a run that aggregation and plotting need."""

    variant: str
    seed: int
    failed: bool
    eval_steps: list[int]
    eval_accuracy: list[float]
    final_priors: dict[str, np.ndarray]  # param -> [layers, heads]
    init_values: dict[str, float]
    profile: Optional[np.ndarray] = None  # [layers, heads, T]

    @property
    def final_accuracy(self) -> float:
        return self.eval_accuracy[-1] if self.eval_accuracy else float("nan")

    @property
    def mean_final_span(self) -> float:
        if "L" not in self.final_priors:
            return float("nan")
        return float(np.mean(self.final_priors["L"]))


def record_from_report(report: TrainReport) -> RunRecord:
    last = report.prior_snapshots[-1]["layers"]
    final: dict[str, np.ndarray] = {}
    if last and last[0]:
        for param in last[0]:
            final[param] = np.stack([layer[param] for layer in last], axis=0)
    cfg = report.config
    return RunRecord(
        variant=cfg.attention_type,
        seed=report.seed,
        failed=report.failed,
        eval_steps=[r["step"] for r in report.evals],
        eval_accuracy=[r["reward_accuracy"] for r in report.evals],
        final_priors=final,
        init_values={
            "L": cfg.init_adaptive_span,
            "mu": cfg.init_adaptive_mu,
            "sigma": cfg.init_adaptive_sigma,
        },
        profile=np.asarray(report.evals[-1]["profile"]) if report.evals else None,
    )


def record_from_dir(run_dir) -> RunRecord:
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    cfg = manifest["config"]
    _, eval_rows = read_csv(run_dir / "evals.csv")
    steps = [int(r["step"]) for r in eval_rows]
    accs = [float(r["reward_accuracy"]) for r in eval_rows]

    _, prior_rows = read_csv(run_dir / "priors.csv")
    final: dict[str, np.ndarray] = {}
    if prior_rows:
        last_step = max(int(r["step"]) for r in prior_rows)
        by_param: dict[str, dict[tuple[int, int], float]] = {}
        for r in prior_rows:
            if int(r["step"]) != last_step:
                continue
            by_param.setdefault(r["param"], {})[(int(r["layer"]), int(r["head"]))] = float(
                r["value"]
            )
        for param, cells in by_param.items():
            n_layer = max(k[0] for k in cells) + 1
            n_head = max(k[1] for k in cells) + 1
            arr = np.zeros((n_layer, n_head))
            for (l, h), v in cells.items():
                arr[l, h] = v
            final[param] = arr

    profile = None
    if (run_dir / "profile.csv").exists():
        _, rows = read_csv(run_dir / "profile.csv")
        if rows:
            nl = max(int(r["layer"]) for r in rows) + 1
            nh = max(int(r["head"]) for r in rows) + 1
            nd = max(int(r["offset"]) for r in rows) + 1
            profile = np.zeros((nl, nh, nd))
            for r in rows:
                profile[int(r["layer"]), int(r["head"]), int(r["offset"])] = float(r["mass"])

    return RunRecord(
        variant=cfg["attention_type"],
        seed=manifest["seed"],
        failed=manifest["failed"],
        eval_steps=steps,
        eval_accuracy=accs,
        final_priors=final,
        init_values={
            "L": cfg["init_adaptive_span"],
            "mu": cfg["init_adaptive_mu"],
            "sigma": cfg["init_adaptive_sigma"],
        },
        profile=profile,
    )


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def _stderr(values: np.ndarray) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / np.sqrt(len(values)))


@dataclass
class SweepSummary:
    variant: str
    seeds: list[int]
    final_mean: float
    final_stderr: float
    per_seed_final: list[float]
    curve_steps: list[int]
    curve_mean: list[float]
    curve_stderr: list[float]
    failed_seeds: list[int] = field(default_factory=list)


def summarize_records(records: list[RunRecord]) -> SweepSummary:
    ok = [r for r in records if not r.failed and r.eval_steps]
    if not ok:
        return SweepSummary(
            variant=records[0].variant if records else "?",
            seeds=[r.seed for r in records],
            final_mean=float("nan"),
            final_stderr=float("nan"),
            per_seed_final=[],
            curve_steps=[],
            curve_mean=[],
            curve_stderr=[],
            failed_seeds=[r.seed for r in records],
        )
    steps = ok[0].eval_steps
    finals = np.array([r.final_accuracy for r in ok])
    curve = np.array([r.eval_accuracy for r in ok])  # [seeds, points]
    return SweepSummary(
        variant=ok[0].variant,
        seeds=[r.seed for r in records],
        final_mean=float(finals.mean()),
        final_stderr=_stderr(finals),
        per_seed_final=[float(v) for v in finals],
        curve_steps=list(steps),
        curve_mean=[float(v) for v in curve.mean(axis=0)],
        curve_stderr=[_stderr(curve[:, i]) for i in range(curve.shape[1])],
        failed_seeds=[r.seed for r in records if r.failed],
    )


def _sweep_worker(args):
    config_dict, task_dict, steps, seed, train_kwargs = args
    return train_run(
        ModelConfig.from_dict(config_dict),
        TaskSpec(**task_dict),
        steps,
        seed,
        **train_kwargs,
    )


def run_sweep(
    config: ModelConfig,
    task: TaskSpec,
    steps: int,
    seeds: Sequence[int],
    out_dir,
    **train_kwargs,
) -> tuple[SweepSummary, list[TrainReport]]:
    """Run one training per seed (optionally in parallel), persist everything.

    Parallelism is capped by the PRIOR_ATTN_THREADS environment variable
    (default 1, i.e. serial). Individual failures are recorded and the
    sweep continues.
    """
    if not seeds:
        raise ConfigError("run_sweep needs at least one seed")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    workers = int(os.environ.get("PRIOR_ATTN_THREADS", "1"))
    jobs = [(config.to_dict(), asdict(task), steps, seed, train_kwargs) for seed in seeds]
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            reports = list(pool.map(_sweep_worker, jobs))
    else:
        reports = [_sweep_worker(job) for job in jobs]

    for seed, report in zip(seeds, reports):
        save_run(report, out_dir / f"run_seed{seed}")

    records = [record_from_report(r) for r in reports]
    summary = summarize_records(records)

    comments = ["aggregate over seeds " + ",".join(str(s) for s in seeds)]
    if len(seeds) == 1:
        comments.append("stderr is 0 by convention for a single seed")
    write_csv(
        out_dir / "sweep_summary.csv",
        ["variant", "seed", "final_accuracy", "failed"],
        [
            (r.variant, r.seed, r.final_accuracy, int(r.failed))
            for r in records
        ]
        + [(summary.variant, "mean", summary.final_mean, len(summary.failed_seeds))],
        comments=comments,
    )
    return summary, reports


# ---------------------------------------------------------------------------
# figure + table emission
# ---------------------------------------------------------------------------


def emit_curves(
    records_by_variant: dict[str, list[RunRecord]],
    out_csv,
    out_svg,
    metric_label: str = "reward accuracy",
    colors: Optional[dict[str, str]] = None,
) -> None:
    """Learning-curve CSV plus an SVG with mean lines and stderr bands.

    A grey dotted horizontal line marks the causal variant's final mean
    when a causal sweep is present.
    """
    if colors is None:
        colors = VARIANT_COLORS
    summaries = {v: summarize_records(rs) for v, rs in records_by_variant.items()}
    summaries = {v: s for v, s in summaries.items() if s.curve_steps}
    if not summaries:
        raise ConfigError("emit_curves: no successful runs")

    steps = None
    for s in summaries.values():
        if steps is None or len(s.curve_steps) > len(steps):
            steps = s.curve_steps
    columns = ["step"]
    for v in sorted(summaries):
        columns += [f"{v}_mean", f"{v}_stderr"]
    rows = []
    for i, step in enumerate(steps):
        row = [step]
        for v in sorted(summaries):
            s = summaries[v]
            if i < len(s.curve_steps):
                row += [s.curve_mean[i], s.curve_stderr[i]]
            else:
                row += ["", ""]
        rows.append(row)
    write_csv(out_csv, columns, rows)

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for v in sorted(summaries):
        s = summaries[v]
        color = colors.get(v)
        x = np.array(s.curve_steps)
        mean = np.array(s.curve_mean)
        err = np.array(s.curve_stderr)
        ax.plot(x, mean, label=v, color=color)
        ax.fill_between(x, mean - err, mean + err, alpha=0.2, color=color, linewidth=0)
    if "causal" in summaries:
        ax.axhline(
            summaries["causal"].final_mean,
            color="#7f7f7f",
            linestyle=":",
            linewidth=1.2,
            label="causal final",
        )
    ax.set_xlabel("training step")
    ax.set_ylabel(metric_label)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _savefig(fig, out_svg)


PARAM_LABELS = {"L": "span L", "mu": "Gaussian mean offset", "sigma": "Gaussian width"}


def dump_learned_priors(records: list[RunRecord], out_dir, prefix: str = "priors") -> list[str]:
    """Per (layer, head) mean/std over seeds of the final learned priors.

    Emits one summary CSV plus a bar chart per parameter family present;
    returns the list of parameter families written. Requesting families
    the variant does not learn yields a warning and an empty summary.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ok = [r for r in records if not r.failed]
    params = sorted({p for r in ok for p in r.final_priors})
    rows = []
    written = []
    for param in params:
        stack = np.stack([r.final_priors[param] for r in ok], axis=0)  # [seeds, L, h]
        mean = stack.mean(axis=0)
        std = stack.std(axis=0)
        init = ok[0].init_values.get(param, float("nan"))
        for l in range(mean.shape[0]):
            for h in range(mean.shape[1]):
                rows.append((param, l, h, float(mean[l, h]), float(std[l, h]), init))
        written.append(param)

        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        labels = [f"L{l}H{h}" for l in range(mean.shape[0]) for h in range(mean.shape[1])]
        ax.bar(
            np.arange(mean.size),
            mean.ravel(),
            yerr=std.ravel(),
            color=VARIANT_COLORS.get(ok[0].variant, "#1f77b4"),
            capsize=2,
        )
        ax.axhline(init, color="k", linestyle="--", linewidth=1.0, label="initialization")
        ax.set_xticks(np.arange(mean.size))
        ax.set_xticklabels(labels, rotation=90, fontsize=6)
        ax.set_ylabel(PARAM_LABELS.get(param, param))
        ax.legend(fontsize=8)
        fig.tight_layout()
        _savefig(fig, out_dir / f"{prefix}_{param}.svg")

    if not params:
        warnings.warn(
            f"no learned prior parameters for variant "
            f"{records[0].variant if records else '?'}; writing empty summary"
        )
    write_csv(
        out_dir / f"{prefix}_summary.csv",
        ["param", "layer", "head", "mean", "std", "init"],
        rows,
    )
    return written


def overhead_report(config: ModelConfig, T: int, out_csv=None) -> str:
    """Per-variant parameter/FLOP table; deltas to 3 decimal places of percent."""
    from .accounting import overhead_table

    rows = overhead_table(config, T)
    lines = [
        f"{'variant':<10} {'total params':>14} {'transformer':>14} {'MFLOPs':>14} {'dMFLOPs %':>10}"
    ]
    csv_rows = []
    for r in rows:
        delta = "-" if r.delta_pct is None else f"+{r.delta_pct:.3f}"
        lines.append(
            f"{r.variant:<10} {r.total_params:>14,} {r.transformer_params:>14,} "
            f"{r.mflops:>14.6f} {delta:>10}"
        )
        csv_rows.append(
            (
                r.variant,
                r.total_params,
                r.transformer_params,
                r.mflops,
                "" if r.delta_pct is None else round(r.delta_pct, 3),
            )
        )
    if out_csv is not None:
        write_csv(
            out_csv,
            ["variant", "total_params", "transformer_params", "mflops", "delta_pct"],
            csv_rows,
            comments=[
                "FLOP convention: 1 MAC = 2 FLOPs; softmax 4/entry, layernorm 8, GELU 8 per element",
                "bias construction per (i,j,head) pair: ramp 3, gaussian 4, gaam 4 (span cutoff is a comparison)",
                f"T={T}",
            ],
        )
    return "\n".join(lines)
