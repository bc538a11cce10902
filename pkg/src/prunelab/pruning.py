"""Turn layer scores into removal plans and run prune(-finetune) pipelines.

Plans speak ORIGINAL model indexing throughout; each round's indices are
mapped to the shrunken model's positions at execution time. One-shot is the
single-round degenerate case of the iterative score-prune-(finetune/merge)
cycle.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .data import CalibrationSet, SftDataset, sample_calibration
from .metrics import DATA_DRIVEN, LayerScoreSet, MetricError, compute_scores
from .model import TransformerModel, remove_layers


class PlanError(ValueError):
    pass


@dataclass
class PruningObjective:
    total: int  # layers to remove overall
    metric: str
    strategy: str = "one-shot"  # or "iterative"
    step: int = 1
    alpha: float | None = None  # acceptable performance ratio, reporting only

    def __post_init__(self):
        if self.strategy not in ("one-shot", "iterative"):
            raise PlanError(f"unknown strategy {self.strategy!r}")
        if self.total < 1:
            raise PlanError("total removed layers must be >= 1")
        if self.step < 1 or self.step > self.total:
            raise PlanError(f"step {self.step} invalid for total {self.total}")


def parse_step_schedule(notation: str) -> tuple[int, int]:
    """'a:b:c' shorthand: step=b, total=c; the leading field is ignored."""
    parts = notation.split(":")
    if len(parts) != 3:
        raise PlanError(f"schedule {notation!r} is not of the form a:b:c")
    try:
        _, step, total = (int(p) for p in parts)
    except ValueError as exc:
        raise PlanError(f"schedule {notation!r} has non-integer fields") from exc
    return step, total


@dataclass
class PruningPlan:
    rounds: list[list[int]]  # original-model indices, one list per round
    metric: str
    fingerprints: dict = field(default_factory=dict)

    def __post_init__(self):
        seen: set[int] = set()
        for round_indices in self.rounds:
            overlap = seen.intersection(round_indices)
            if overlap:
                raise PlanError(f"rounds overlap on layers {sorted(overlap)}")
            seen.update(round_indices)

    def all_removed(self) -> list[int]:
        return sorted(i for round_indices in self.rounds for i in round_indices)

    def to_json(self) -> str:
        return json.dumps(
            {"rounds": self.rounds, "metric": self.metric, "fingerprints": self.fingerprints},
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "PruningPlan":
        raw = json.loads(text)
        return cls(
            rounds=[list(map(int, r)) for r in raw["rounds"]],
            metric=raw["metric"],
            fingerprints=raw.get("fingerprints", {}),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path


def make_plan(scores: LayerScoreSet, k: int) -> PruningPlan:
    """One-round plan: the bottom-k of the score ordering."""
    if not 0 <= k < scores.num_layers:
        raise PlanError(f"k={k} out of range for {scores.num_layers} layers")
    return PruningPlan(
        rounds=[scores.bottom_k(k)],
        metric=scores.metric,
        fingerprints={
            "calibration": scores.calibration_fingerprint,
            "model": scores.model_fingerprint,
        },
    )


def relabel_to_current(original_index: int, removed_original: set[int]) -> int:
    """Map an original layer index to its position after prior removals."""
    if original_index in removed_original:
        raise PlanError(f"layer {original_index} was already removed")
    return original_index - sum(1 for r in removed_original if r < original_index)


@dataclass
class RoundRecord:
    round_index: int
    metric: str
    scores: list[float]
    removed_original: list[int]
    removed_current: list[int]
    layers_after: int
    calibration_fingerprint: dict | None
    finetune: dict | None
    seconds: float


@dataclass
class PipelineRecord:
    strategy: str
    metric: str
    total: int
    step: int
    seed: int
    rounds: list[RoundRecord] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    final_layer_count: int = 0
    total_seconds: float = 0.0

    def plan(self) -> PruningPlan:
        return PruningPlan(
            rounds=[r.removed_original for r in self.rounds],
            metric=self.metric,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


@dataclass
class CalibrationSource:
    """How pipelines draw calibration data, round by round.

    Each round r draws with seed + r so that round 0 reproduces the one-shot
    draw exactly; `reuse` freezes the round-0 set for every round instead.
    """

    docs: list[list[int]]
    count: int = 10
    seq_len: int = 128
    seed: int = 0
    source: str = "corpus"
    reuse: bool = False

    def for_round(self, round_index: int) -> CalibrationSet:
        offset = 0 if self.reuse else round_index
        return sample_calibration(
            self.docs, self.count, self.seq_len, self.seed + offset, self.source
        )


@dataclass
class FinetuneSpec:
    """What recovery to run after each pruning round (see finetune module)."""

    method: str  # "lora" | "partial" | "none"
    last_k: int = 3  # partial: blocks trained next to lm_head
    rank: int = 8
    alpha: float = 16.0
    roles: tuple[str, ...] | None = None  # lora targets; None = all matrices
    dataset: SftDataset | None = None
    train_config: object | None = None  # finetune.TrainConfig

    def __post_init__(self):
        if self.method not in ("lora", "partial", "none"):
            raise PlanError(f"unknown finetune method {self.method!r}")
        if self.method != "none" and self.dataset is None:
            raise PlanError(f"finetune method {self.method!r} needs a dataset")


def _score_current(
    metric: str,
    model: TransformerModel,
    calib_source: CalibrationSource | None,
    seed: int,
) -> tuple[LayerScoreSet, CalibrationSet | None]:
    calib = None
    if metric in DATA_DRIVEN:
        if calib_source is None:
            raise MetricError(f"metric {metric!r} needs calibration data")
        calib = calib_source.for_round(0)
    return compute_scores(metric, model, calib, seed=seed), calib


def one_shot_prune(
    model: TransformerModel,
    metric: str,
    k: int,
    calib_source: CalibrationSource | None = None,
    metric_seed: int = 0,
) -> tuple[TransformerModel, PipelineRecord]:
    """Score once, cut k layers once. No fine-tuning happens in here."""
    started = time.perf_counter()
    scores, calib = _score_current(metric, model, calib_source, metric_seed)
    plan = make_plan(scores, k)
    removed = plan.rounds[0]
    pruned = remove_layers(model, set(removed))
    record = PipelineRecord(
        strategy="one-shot", metric=metric, total=k, step=k, seed=metric_seed
    )
    record.rounds.append(
        RoundRecord(
            round_index=0,
            metric=metric,
            scores=list(scores.scores),
            removed_original=removed,
            removed_current=removed,
            layers_after=pruned.spec.num_layers,
            calibration_fingerprint=calib.fingerprint() if calib else None,
            finetune=None,
            seconds=time.perf_counter() - started,
        )
    )
    record.final_layer_count = pruned.spec.num_layers
    record.total_seconds = time.perf_counter() - started
    return pruned, record


def iterative_prune(
    model: TransformerModel,
    metric: str,
    step: int,
    total: int,
    calib_source: CalibrationSource | None = None,
    finetune_spec: FinetuneSpec | None = None,
    metric_seed: int = 0,
) -> tuple[TransformerModel, PipelineRecord]:
    """Repeat score-prune(-finetune/merge) on the CURRENT model until `total`
    layers are gone. Scores are recomputed each round; adapter deltas merge
    back before the next round; with partial-layer recovery the step is
    clamped to the protected-layer window so trained blocks survive."""
    if not 1 <= step <= total < model.spec.num_layers:
        raise PlanError(
            f"invalid schedule: step {step}, total {total}, layers {model.spec.num_layers}"
        )
    record = PipelineRecord(
        strategy="iterative", metric=metric, total=total, step=step, seed=metric_seed
    )
    if finetune_spec and finetune_spec.method == "partial" and step > finetune_spec.last_k:
        record.notes.append(
            f"step {step} clamped to protected-layer window {finetune_spec.last_k}"
        )
        step = finetune_spec.last_k

    from . import finetune as ft

    started = time.perf_counter()
    current = model
    removed_original: list[int] = []
    survivors = list(range(model.spec.num_layers))
    round_index = 0
    while len(removed_original) < total:
        round_start = time.perf_counter()
        this_step = min(step, total - len(removed_original))
        calib = None
        if metric in DATA_DRIVEN:
            if calib_source is None:
                raise MetricError(f"metric {metric!r} needs calibration data")
            calib = calib_source.for_round(round_index)
        scores = compute_scores(metric, current, calib, seed=metric_seed + round_index)
        removed_current = scores.bottom_k(this_step)
        removed_this_round = sorted(survivors[i] for i in removed_current)
        survivors = [s for i, s in enumerate(survivors) if i not in set(removed_current)]
        removed_original.extend(removed_this_round)
        current = remove_layers(current, set(removed_current))

        finetune_summary = None
        if finetune_spec and finetune_spec.method != "none":
            try:
                current, finetune_summary = ft.run_recovery(current, finetune_spec)
            except ft.TrainingDiverged as exc:
                record.rounds.append(
                    RoundRecord(
                        round_index, metric, list(scores.scores), removed_this_round,
                        removed_current, current.spec.num_layers,
                        calib.fingerprint() if calib else None,
                        {"error": str(exc), "curve": exc.curve},
                        time.perf_counter() - round_start,
                    )
                )
                record.notes.append(f"round {round_index}: fine-tuning diverged, aborting")
                record.final_layer_count = current.spec.num_layers
                record.total_seconds = time.perf_counter() - started
                exc.pipeline_record = record  # partial record survives the abort
                raise

        record.rounds.append(
            RoundRecord(
                round_index=round_index,
                metric=metric,
                scores=list(scores.scores),
                removed_original=removed_this_round,
                removed_current=removed_current,
                layers_after=current.spec.num_layers,
                calibration_fingerprint=calib.fingerprint() if calib else None,
                finetune=finetune_summary,
                seconds=time.perf_counter() - round_start,
            )
        )
        round_index += 1

    record.final_layer_count = current.spec.num_layers
    record.total_seconds = time.perf_counter() - started
    return current, record
