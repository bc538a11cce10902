"""Measurement kit: perplexity, zero-shot choice scoring, reports, sweeps."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import EvalTask, Tokenizer
from .model import TransformerModel, count_macs, count_params, estimate_memory_bytes
from .tensor import Tensor, no_grad


class EvalError(ValueError):
    pass


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    x = logits.astype(np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def sequence_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-position negative log-likelihood, computed in float64."""
    logp = _log_softmax(logits)
    return -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]


PPL_BATCH = 64


def perplexity(model, docs: list[list[int]], window: int | None = None) -> float:
    """exp(mean next-token NLL) over non-overlapping windows.

    Windows never cross document boundaries; each window of length L scores
    its L-1 continuation positions. Windows are scored in padded batches
    (causal masking keeps each row's scores independent of the padding). Any
    object with `.forward(tokens)` and a `.spec.max_seq_len` works as the
    model.
    """
    if not docs or all(len(d) < 2 for d in docs):
        raise EvalError("empty corpus: nothing to score")
    window = window or model.spec.max_seq_len
    windows: list[list[int]] = []
    for doc in docs:
        for start in range(0, len(doc), window):
            chunk = doc[start : start + window]
            if len(chunk) >= 2:
                windows.append(chunk)
    if not windows:
        raise EvalError("empty corpus: nothing to score")
    total_nll = 0.0
    positions = 0
    with no_grad():
        for start in range(0, len(windows), PPL_BATCH):
            batch = windows[start : start + PPL_BATCH]
            width = max(len(w) for w in batch)
            tokens = np.zeros((len(batch), width), dtype=np.int64)
            for row, w in enumerate(batch):
                tokens[row, : len(w)] = w
            logits = model.forward(tokens)
            data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
            nll = sequence_nll(data[:, :-1], tokens[:, 1:])
            for row, w in enumerate(batch):
                total_nll += float(nll[row, : len(w) - 1].sum())
                positions += len(w) - 1
    return float(np.exp(total_nll / positions))


# ---------------------------------------------------------------------------
# zero-shot multiple choice
# ---------------------------------------------------------------------------


@dataclass
class ChoiceScore:
    item_index: int
    log_likelihoods: list[float]
    normalization: str
    predicted: int


@dataclass
class TaskResult:
    task_name: str
    accuracy: float
    standard_error: float
    item_count: int
    choice_scores: list[ChoiceScore]


def zero_shot_eval(
    model,
    tokenizer: Tokenizer,
    task: EvalTask,
    normalization: str = "sum",
) -> TaskResult:
    """Score each choice by summed log-likelihood of its tokens conditioned on
    the context; argmax against gold. `normalization="per_token"` divides each
    choice score by its token count."""
    if normalization not in ("sum", "per_token"):
        raise EvalError(f"unknown normalization {normalization!r}")
    scores = []
    correct = 0
    with no_grad():
        for index, item in enumerate(task.items):
            context_ids = tokenizer.encode(item.context, add_bos=True)
            rows = []
            for choice in item.choices:
                choice_ids = tokenizer.encode(choice)
                if not choice_ids:
                    raise EvalError(
                        f"{task.name} item {index}: choice {choice!r} tokenizes to nothing"
                    )
                rows.append(context_ids + choice_ids)
            # one padded forward per item; causal masking isolates each row
            width = max(len(r) for r in rows)
            ids = np.zeros((len(rows), width), dtype=np.int64)
            for r, row in enumerate(rows):
                ids[r, : len(row)] = row
            logits = model.forward(ids)
            data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
            nll = sequence_nll(data[:, :-1], ids[:, 1:])
            lls = []
            for r, row in enumerate(rows):
                choice_len = len(row) - len(context_ids)
                choice_nll = nll[r, len(context_ids) - 1 : len(row) - 1]
                ll = -float(choice_nll.sum())
                if normalization == "per_token":
                    ll /= choice_len
                lls.append(ll)
            predicted = int(np.argmax(lls))
            correct += predicted == item.answer
            scores.append(ChoiceScore(index, lls, normalization, predicted))
    n = len(task.items)
    p = correct / n
    return TaskResult(task.name, p, float(np.sqrt(p * (1 - p) / n)), n, scores)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    model_fingerprint: str
    perplexities: dict[str, float]
    task_accuracies: dict[str, dict]  # name -> {accuracy, standard_error, items}
    average_accuracy: float | None
    param_count: int
    mac_count: int
    memory_bytes: int
    eval_seconds: float
    label: str = ""

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "model_fingerprint": self.model_fingerprint,
            "perplexities": self.perplexities,
            "task_accuracies": self.task_accuracies,
            "average_accuracy": self.average_accuracy,
            "param_count": self.param_count,
            "mac_count": self.mac_count,
            "memory_bytes": self.memory_bytes,
            "timing": {"eval_seconds": self.eval_seconds},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            model_fingerprint=d["model_fingerprint"],
            perplexities=d["perplexities"],
            task_accuracies=d["task_accuracies"],
            average_accuracy=d["average_accuracy"],
            param_count=d["param_count"],
            mac_count=d["mac_count"],
            memory_bytes=d["memory_bytes"],
            eval_seconds=d.get("timing", {}).get("eval_seconds", 0.0),
            label=d.get("label", ""),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def build_report(
    model: TransformerModel,
    tokenizer: Tokenizer | None = None,
    tasks: list[EvalTask] | None = None,
    corpora: dict[str, list[list[int]]] | None = None,
    mac_seq_len: int = 64,
    normalization: str = "sum",
    label: str = "",
) -> EvalReport:
    """Aggregate perplexities, task accuracies and model statistics."""
    started = time.perf_counter()
    perplexities = {
        name: perplexity(model, docs) for name, docs in (corpora or {}).items()
    }
    task_accuracies = {}
    for task in tasks or []:
        result = zero_shot_eval(model, tokenizer, task, normalization)
        task_accuracies[task.name] = {
            "accuracy": result.accuracy,
            "standard_error": result.standard_error,
            "items": result.item_count,
        }
    average = (
        float(np.mean([t["accuracy"] for t in task_accuracies.values()]))
        if task_accuracies
        else None
    )
    return EvalReport(
        model_fingerprint=model.fingerprint(),
        perplexities=perplexities,
        task_accuracies=task_accuracies,
        average_accuracy=average,
        param_count=count_params(model.spec),
        mac_count=count_macs(model.spec, seq_len=mac_seq_len),
        memory_bytes=estimate_memory_bytes(model.spec, seq_len=mac_seq_len),
        eval_seconds=time.perf_counter() - started,
        label=label,
    )


def render_reports_table(reports: list[EvalReport]) -> str:
    """Aligned comparison grid, one row per report, best cell per metric
    column starred (higher accuracy, lower perplexity)."""
    if not reports:
        raise EvalError("no reports to render")
    task_names = sorted({name for r in reports for name in r.task_accuracies})
    ppl_names = sorted({name for r in reports for name in r.perplexities})
    columns = (
        ["run"]
        + [f"ppl:{n}" for n in ppl_names]
        + [f"acc:{n}" for n in task_names]
        + ["avg_acc", "params"]
    )

    def cells(report: EvalReport) -> list[str]:
        row = [report.label or report.model_fingerprint]
        for n in ppl_names:
            v = report.perplexities.get(n)
            row.append("-" if v is None else f"{v:.4f}")
        for n in task_names:
            t = report.task_accuracies.get(n)
            row.append("-" if t is None else f"{t['accuracy']:.4f}")
        row.append("-" if report.average_accuracy is None else f"{report.average_accuracy:.4f}")
        row.append(f"{report.param_count:,}")
        return row

    grid = [cells(r) for r in reports]
    # star the best value per metric column
    for c in range(1, 1 + len(ppl_names) + len(task_names) + 1):
        header = columns[c]
        values = [
            (i, float(row[c])) for i, row in enumerate(grid) if row[c] not in ("-",)
        ]
        if len(values) > 1:
            best = min(values, key=lambda iv: iv[1]) if header.startswith("ppl:") else max(
                values, key=lambda iv: iv[1]
            )
            i, v = best
            grid[i][c] = f"*{grid[i][c]}*"
    widths = [max(len(columns[c]), *(len(row[c]) for row in grid)) for c in range(len(columns))]
    lines = ["  ".join(columns[c].ljust(widths[c]) for c in range(len(columns)))]
    lines.append("  ".join("-" * w for w in widths))
    for row in grid:
        lines.append("  ".join(row[c].ljust(widths[c]) for c in range(len(columns))))
    return "\n".join(lines)


def merge_reports(reports: list[EvalReport]) -> str:
    """Merge run reports into one comparison table; refuses disjoint suites."""
    if len(reports) > 1:
        suites = [set(r.task_accuracies) for r in reports]
        base = suites[0]
        for other in suites[1:]:
            if base and other and base.isdisjoint(other):
                raise EvalError(
                    "reports evaluate disjoint task suites and cannot be merged: "
                    f"{sorted(base)} vs {sorted(other)}"
                )
    return render_reports_table(reports)


# ---------------------------------------------------------------------------
# sensitivity sweeps
# ---------------------------------------------------------------------------

SWEEP_KINDS = ("calibration-count", "prune-rate", "sft-dataset")


@dataclass
class SweepPoint:
    kind: str
    value: object
    metric: str
    removed_layers: list[int] | None
    perplexities: dict[str, float]
    average_accuracy: float | None
    error: str | None = None


@dataclass
class SweepReport:
    kind: str
    points: list[SweepPoint] = field(default_factory=list)

    def to_rows(self) -> list[dict]:
        return [
            {
                "kind": p.kind,
                "value": p.value,
                "metric": p.metric,
                "removed_layers": "" if p.removed_layers is None else " ".join(map(str, p.removed_layers)),
                **{f"ppl:{k}": v for k, v in p.perplexities.items()},
                "avg_acc": p.average_accuracy,
                "error": p.error or "",
            }
            for p in self.points
        ]

    def save_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        rows = self.to_rows()
        fieldnames: list[str] = []
        for row in rows:
            for key in row:
                if key not in fieldnames:
                    fieldnames.append(key)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fieldnames)
            writer.writeheader()
            writer.writerows(rows)
        return path


def sensitivity_sweep(kind: str, grid: list, run_point) -> SweepReport:
    """Run `run_point(value) -> list[SweepPoint]` per grid value; a failing
    point is recorded with its error and the sweep continues."""
    if kind not in SWEEP_KINDS:
        raise EvalError(f"unknown sweep kind {kind!r}; expected one of {SWEEP_KINDS}")
    if not grid:
        raise EvalError("empty sweep grid")
    report = SweepReport(kind)
    for value in grid:
        try:
            report.points.extend(run_point(value))
        except Exception as exc:  # record and continue per sweep contract
            report.points.append(
                SweepPoint(kind, value, "", None, {}, None, error=f"{type(exc).__name__}: {exc}")
            )
    return report


@dataclass
class SweepConfig:
    """Shared fixings for one sweep: base model, calibration corpus, recovery
    choice and the measurement suite."""

    model: TransformerModel
    calib_docs: list[list[int]]
    total: int = 2
    calib_count: int = 10
    calib_seq_len: int = 128
    seed: int = 0
    metrics: tuple[str, ...] = ("taylor", "bi")
    eval_corpora: dict[str, list[list[int]]] | None = None
    tasks: list[EvalTask] | None = None
    tokenizer: Tokenizer | None = None
    finetune_spec: object | None = None  # pruning.FinetuneSpec


def _measure_point(kind: str, value, metric: str, model, removed: list[int],
                   config: SweepConfig) -> SweepPoint:
    perplexities = {
        name: perplexity(model, docs)
        for name, docs in (config.eval_corpora or {}).items()
    }
    average = None
    if config.tasks:
        accs = [
            zero_shot_eval(model, config.tokenizer, task).accuracy for task in config.tasks
        ]
        average = float(np.mean(accs))
    return SweepPoint(kind, value, metric, removed, perplexities, average)


def _prune_and_recover(config: SweepConfig, metric: str, total: int, calib_count: int):
    from .pruning import CalibrationSource, FinetuneSpec, one_shot_prune  # lazy: avoids cycle

    source = CalibrationSource(
        config.calib_docs, count=calib_count, seq_len=config.calib_seq_len, seed=config.seed
    )
    pruned, record = one_shot_prune(
        config.model, metric, total, source, metric_seed=config.seed
    )
    if config.finetune_spec is not None:
        from . import finetune as ft

        pruned, _ = ft.run_recovery(pruned, config.finetune_spec)
    return pruned, record.plan().all_removed()


def calibration_count_sweep(config: SweepConfig, grid: list[int]) -> SweepReport:
    """Per calibration-sample count and data-driven metric: the removed-layer
    set plus the measurement suite on the resulting model."""

    def run_point(count: int) -> list[SweepPoint]:
        points = []
        for metric in config.metrics:
            model, removed = _prune_and_recover(config, metric, config.total, count)
            points.append(
                _measure_point("calibration-count", count, metric, model, removed, config)
            )
        return points

    return sensitivity_sweep("calibration-count", list(grid), run_point)


def prune_rate_sweep(config: SweepConfig, grid: list[int]) -> SweepReport:
    """Per removed-layer total and metric: removed set plus measurements."""

    def run_point(total: int) -> list[SweepPoint]:
        points = []
        for metric in config.metrics:
            model, removed = _prune_and_recover(config, metric, total, config.calib_count)
            points.append(_measure_point("prune-rate", total, metric, model, removed, config))
        return points

    return sensitivity_sweep("prune-rate", list(grid), run_point)


def sft_dataset_sweep(config: SweepConfig, datasets: list, make_finetune_spec) -> SweepReport:
    """Per SFT dataset: prune once per metric, recover with that dataset,
    measure. `make_finetune_spec(dataset)` builds the recovery spec."""

    def run_point(dataset) -> list[SweepPoint]:
        points = []
        for metric in config.metrics:
            from .pruning import CalibrationSource, one_shot_prune
            from . import finetune as ft

            source = CalibrationSource(
                config.calib_docs, count=config.calib_count,
                seq_len=config.calib_seq_len, seed=config.seed,
            )
            pruned, record = one_shot_prune(
                config.model, metric, config.total, source, metric_seed=config.seed
            )
            pruned, _ = ft.run_recovery(pruned, make_finetune_spec(dataset))
            points.append(
                _measure_point(
                    "sft-dataset", getattr(dataset, "name", str(dataset)), metric,
                    pruned, record.plan().all_removed(), config,
                )
            )
        return points

    return sensitivity_sweep("sft-dataset", list(datasets), run_point)
