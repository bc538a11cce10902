"""Config-driven command line: train a base model, score, prune, fine-tune,
evaluate, sweep, and merge reports.

Every command snapshots its config into the output directory and is
reproducible from that snapshot plus the seed. Exit codes: 0 success,
2 config/validation failure, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evalkit, finetune as ft, metrics, pruning
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    DataError,
    Tokenizer,
    build_tokenizer,
    corpus_documents,
    load_corpus,
    load_eval_task,
    load_sft,
)
from .model import TransformerModel, TransformerSpec, greedy_generate, load_preset

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2

SEED_ENV_VAR = "PRUNELAB_SEED"


class ValidationError(ValueError):
    """Bad config or arguments; exits with code 2 and a field-level message."""


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: Path
    raw: dict
    text: str
    base_dir: Path

    def section(self, name: str) -> dict:
        return self.raw.get(name, {})

    def require(self, section: str, key: str):
        value = self.section(section).get(key)
        if value is None:
            raise ValidationError(f"config field [{section}].{key} is required")
        return value

    def path(self, section: str, key: str, required: bool = True) -> Path | None:
        value = self.section(section).get(key)
        if value is None:
            if required:
                raise ValidationError(f"config field [{section}].{key} is required")
            return None
        resolved = (self.base_dir / value).resolve()
        if not resolved.exists():
            raise ValidationError(f"config field [{section}].{key}: no such file: {resolved}")
        return resolved


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    text = path.read_text()
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"config {path} is not valid TOML: {exc}") from exc
    experiment = raw.get("experiment", {})
    seed = os.environ.get(SEED_ENV_VAR)
    if seed is not None:
        try:
            seed = int(seed)
        except ValueError as exc:
            raise ValidationError(f"{SEED_ENV_VAR} must be an integer, got {seed!r}") from exc
    else:
        seed = experiment.get("seed")
        if seed is None:
            raise ValidationError(
                f"config field [experiment].seed is required (or set {SEED_ENV_VAR})"
            )
    output_dir = experiment.get("output_dir")
    if output_dir is None:
        raise ValidationError("config field [experiment].output_dir is required")
    base_dir = path.parent.resolve()
    return ExperimentConfig(
        seed=int(seed),
        output_dir=(base_dir / output_dir).resolve(),
        raw=raw,
        text=text,
        base_dir=base_dir,
    )


def snapshot_config(config: ExperimentConfig, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.snapshot").write_text(config.text)


# ---------------------------------------------------------------------------
# shared assembly helpers
# ---------------------------------------------------------------------------


def _resolve_spec(config: ExperimentConfig, vocab_size: int) -> TransformerSpec:
    model_section = config.section("model")
    if "preset" in model_section:
        try:
            return load_preset(model_section["preset"], vocab_size=vocab_size)
        except FileNotFoundError as exc:
            raise ValidationError(f"config field [model].preset: {exc}") from exc
    if "spec" in model_section:
        fields = dict(model_section["spec"])
        if fields.get("vocab_size", 0) == 0:
            fields["vocab_size"] = vocab_size
        try:
            return TransformerSpec.from_dict(fields)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"config table [model.spec] is invalid: {exc}") from exc
    raise ValidationError("config needs [model].preset or a [model.spec] table")


def _build_tokenizer(config: ExperimentConfig, corpus_text: str) -> Tokenizer:
    """Char vocabularies must cover everything later encoded: corpus, the
    instruction templates, and any configured SFT/eval text."""
    from .data import PROMPT_WITH_INPUT

    kind = config.section("tokenizer").get("kind", "char")
    pieces = [corpus_text, PROMPT_WITH_INPUT.format(instruction="", input="")]
    for section, key in (("sft", "path"),):
        extra = config.path(section, key, required=False)
        if extra is not None:
            pieces.append(extra.read_text())
    for task_path in config.section("eval").get("tasks", []):
        resolved = (config.base_dir / task_path).resolve()
        if resolved.exists():
            pieces.append(resolved.read_text())
    try:
        return build_tokenizer("".join(pieces), kind=kind)
    except DataError as exc:
        raise ValidationError(f"config field [tokenizer].kind: {exc}") from exc


def _tokenizer_from_meta(meta: dict) -> Tokenizer:
    info = meta.get("tokenizer")
    if not info:
        raise ValidationError(
            "checkpoint carries no tokenizer metadata; was it written by train-base?"
        )
    return Tokenizer(kind=info["kind"], entries=list(info["entries"]))


def _load_model(checkpoint: str | Path) -> tuple[TransformerModel, dict, Tokenizer]:
    path = Path(checkpoint)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    model, meta = load_checkpoint(path)
    return model, meta, _tokenizer_from_meta(meta)


def _calibration_source(config: ExperimentConfig, tokenizer: Tokenizer) -> pruning.CalibrationSource:
    corpus_path = config.path("corpus", "train")
    docs = corpus_documents(load_corpus(corpus_path), tokenizer)
    section = config.section("calibration")
    return pruning.CalibrationSource(
        docs,
        count=int(section.get("count", 10)),
        seq_len=int(section.get("seq_len", 128)),
        seed=int(section.get("seed", config.seed)),
        source=corpus_path.stem,
        reuse=bool(section.get("reuse", False)),
    )


def _finetune_spec(config: ExperimentConfig, tokenizer: Tokenizer,
                   override: str | None = None) -> pruning.FinetuneSpec | None:
    section = dict(config.section("finetune"))
    method = section.get("method", "none")
    last_k = int(section.get("last_k", 3))
    if override is not None:
        if override.startswith("partial:"):
            method, last_k = "partial", int(override.split(":", 1)[1])
        elif override in ("lora", "partial", "none"):
            method = override
        else:
            raise ValidationError(
                f"--finetune must be lora, partial:k or none, got {override!r}"
            )
    if method == "none":
        return None
    sft_path = config.path("sft", "path")
    dataset = load_sft(
        sft_path,
        tokenizer,
        format=config.section("sft").get("format", "alpaca"),
        max_seq_len=int(config.section("sft").get("max_seq_len", 512)),
    )
    train_config = ft.TrainConfig(
        epochs=int(section.get("epochs", 2)),
        batch_size=int(section.get("batch_size", 64)),
        learning_rate=float(section.get("learning_rate", 1e-5)),
        warmup_steps=int(section.get("warmup_steps", 100)),
        adapter_rank=int(section.get("rank", 8)),
        seed=config.seed,
        max_seq_len=int(section.get("max_seq_len", 512)),
    )
    try:
        return pruning.FinetuneSpec(
            method=method,
            last_k=last_k,
            rank=int(section.get("rank", 8)),
            alpha=float(section.get("alpha", 16.0)),
            roles=tuple(section["roles"]) if "roles" in section else None,
            dataset=dataset,
            train_config=train_config,
        )
    except pruning.PlanError as exc:
        raise ValidationError(f"config table [finetune]: {exc}") from exc


def _eval_suite(config: ExperimentConfig, tokenizer: Tokenizer):
    tasks = []
    for task_path in config.section("eval").get("tasks", []):
        resolved = (config.base_dir / task_path).resolve()
        if not resolved.exists():
            raise ValidationError(f"config field [eval].tasks: no such file: {resolved}")
        tasks.append(load_eval_task(resolved))
    corpora = {}
    eval_corpus = config.path("corpus", "eval", required=False)
    if eval_corpus is not None:
        docs = corpus_documents(load_corpus(eval_corpus), tokenizer)
        max_docs = config.section("eval").get("ppl_max_docs")
        if max_docs is not None:
            docs = docs[: int(max_docs)]
        corpora[eval_corpus.stem] = docs
    return tasks, corpora


def _objective_args(config: ExperimentConfig, args) -> tuple[str, str, int, int]:
    section = config.section("pruning")
    metric = args.metric or section.get("metric")
    if metric is None:
        raise ValidationError("config field [pruning].metric is required (or pass --metric)")
    if metric not in metrics.METRIC_NAMES:
        raise ValidationError(
            f"config field [pruning].metric: unknown metric {metric!r} "
            f"(valid: {', '.join(metrics.METRIC_NAMES)})"
        )
    strategy = args.strategy or section.get("strategy", "one-shot")
    if getattr(args, "schedule", None):
        step, total = pruning.parse_step_schedule(args.schedule)
    else:
        total = args.total if args.total is not None else section.get("total")
        if total is None:
            raise ValidationError("config field [pruning].total is required (or pass --total)")
        step = args.step if args.step is not None else section.get("step", 1)
    return metric, strategy, int(step), int(total)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train_base(args) -> int:
    config = load_config(args.config)
    corpus_path = config.path("corpus", "train")
    corpus_text = load_corpus(corpus_path)
    tokenizer = _build_tokenizer(config, corpus_text)
    spec = _resolve_spec(config, tokenizer.vocab_size)
    docs = corpus_documents(corpus_text, tokenizer)

    run_dir = config.output_dir
    snapshot_config(config, run_dir)
    tokenizer.save_vocab(run_dir / "tokenizer.vocab")

    section = config.section("train")
    lm_config = ft.LmTrainConfig(
        steps=int(section.get("steps", 300)),
        batch_size=int(section.get("batch_size", 8)),
        seq_len=int(section.get("seq_len", 64)),
        learning_rate=float(section.get("learning_rate", 1e-3)),
        warmup_steps=int(section.get("warmup_steps", 30)),
        seed=config.seed,
    )
    model = TransformerModel.build(spec, seed=config.seed)
    result = ft.train_lm(model, docs, lm_config)
    result.save_curve(run_dir / "curves" / "train_base.csv")
    meta = {
        "seed": config.seed,
        "step": result.steps,
        "dataset_fingerprint": {"corpus": corpus_path.name, "documents": len(docs)},
        "tokenizer": {"kind": tokenizer.kind, "entries": tokenizer.entries},
    }
    path = save_checkpoint(model, run_dir / "checkpoints" / "base.ckpt", meta=meta)
    print(f"trained {spec.num_layers}-layer model for {result.steps} steps "
          f"(loss {result.initial_loss:.4f} -> {result.final_loss:.4f})")
    print(f"checkpoint: {path}")
    return EXIT_OK


def cmd_score(args) -> int:
    config = load_config(args.config)
    model, _, tokenizer = _load_model(args.checkpoint)
    metric, _, _, _ = _objective_args(config, args)
    calib = None
    if metric in metrics.DATA_DRIVEN:
        calib = _calibration_source(config, tokenizer).for_round(0)
    scores = metrics.compute_scores(metric, model, calib, seed=config.seed)
    run_dir = config.output_dir
    snapshot_config(config, run_dir)
    csv_path = scores.save_csv(run_dir / f"scores_{metric}.csv")
    scores.save_json(run_dir / f"scores_{metric}.json")
    order = scores.prune_order()
    print(f"{metric}: prune order {order}")
    print(f"scores: {csv_path}")
    return EXIT_OK


def cmd_prune(args) -> int:
    config = load_config(args.config)
    model, meta, tokenizer = _load_model(args.checkpoint)
    metric, strategy, step, total = _objective_args(config, args)
    source = (
        _calibration_source(config, tokenizer) if metric in metrics.DATA_DRIVEN else None
    )
    if strategy == "one-shot":
        pruned, record = pruning.one_shot_prune(model, metric, total, source, config.seed)
    else:
        pruned, record = pruning.iterative_prune(
            model, metric, step, total, source, None, config.seed
        )
    run_dir = config.output_dir
    snapshot_config(config, run_dir)
    record.plan().save(run_dir / "plan.json")
    record.save(run_dir / "record.json")
    meta = dict(meta)
    meta["pruned_from"] = str(args.checkpoint)
    meta["removed_layers"] = record.plan().all_removed()
    path = save_checkpoint(pruned, run_dir / "checkpoints" / "pruned.ckpt", meta=meta)
    print(f"removed layers {record.plan().all_removed()} "
          f"({model.spec.num_layers} -> {pruned.spec.num_layers})")
    print(f"checkpoint: {path}")
    return EXIT_OK


def _save_curve_rows(rows, path: Path) -> None:
    import csv

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr"])
        writer.writerows(rows)


def cmd_finetune(args) -> int:
    config = load_config(args.config)
    model, meta, tokenizer = _load_model(args.checkpoint)
    spec = _finetune_spec(config, tokenizer, override=args.finetune)
    if spec is None:
        raise ValidationError("config table [finetune] selects method none; nothing to do")
    run_dir = config.output_dir
    snapshot_config(config, run_dir)
    recovered, summary = ft.run_recovery(model, spec)
    _save_curve_rows(summary["curve"], run_dir / "curves" / "finetune.csv")
    (run_dir / "train_config.json").write_text(
        json.dumps(summary["train_config"], indent=2, sort_keys=True) + "\n"
    )
    meta = dict(meta)
    meta["finetune"] = {k: v for k, v in summary.items() if k != "curve"}
    path = save_checkpoint(recovered, run_dir / "checkpoints" / "finetuned.ckpt", meta=meta)
    print(f"{summary['method']} recovery: loss {summary['initial_loss']:.4f} -> "
          f"{summary['final_loss']:.4f} over {summary['steps']} steps")
    print(f"checkpoint: {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_config(args.config)
    model, _, tokenizer = _load_model(args.checkpoint)
    tasks, corpora = _eval_suite(config, tokenizer)
    report = evalkit.build_report(
        model, tokenizer, tasks, corpora, label=args.label or Path(args.checkpoint).stem
    )
    run_dir = config.output_dir
    snapshot_config(config, run_dir)
    path = report.save(run_dir / "report.json")
    print(evalkit.render_reports_table([report]))
    print(f"report: {path}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    config = load_config(args.config)
    model, meta, tokenizer = _load_model(args.checkpoint)
    metric, strategy, step, total = _objective_args(config, args)
    finetune_spec = _finetune_spec(config, tokenizer, override=args.finetune)
    source = (
        _calibration_source(config, tokenizer) if metric in metrics.DATA_DRIVEN else None
    )
    run_dir = config.output_dir
    snapshot_config(config, run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "curves").mkdir(parents=True, exist_ok=True)

    try:
        if strategy == "one-shot":
            pruned, record = pruning.one_shot_prune(model, metric, total, source, config.seed)
            if finetune_spec is not None:
                final, summary = ft.run_recovery(pruned, finetune_spec)
                record.rounds[-1].finetune = summary
            else:
                final = pruned
        else:
            final, record = pruning.iterative_prune(
                model, metric, step, total, source, finetune_spec, config.seed
            )
            pruned = final
    except ft.TrainingDiverged as exc:
        partial = getattr(exc, "pipeline_record", None)
        if partial is not None:
            partial.save(run_dir / "record.json")
        raise
    for round_record in record.rounds:
        if round_record.finetune and "curve" in round_record.finetune:
            _save_curve_rows(
                round_record.finetune["curve"],
                run_dir / "curves" / f"finetune_round{round_record.round_index}.csv",
            )
    record.save(run_dir / "record.json")
    record.plan().save(run_dir / "plan.json")
    save_checkpoint(pruned, run_dir / "checkpoints" / "pruned.ckpt", meta=dict(meta))
    save_checkpoint(final, run_dir / "checkpoints" / "final.ckpt", meta=dict(meta))

    tasks, corpora = _eval_suite(config, tokenizer)
    label = f"{metric}/{strategy}" + (f"/{args.finetune}" if args.finetune else "")
    report = evalkit.build_report(final, tokenizer, tasks, corpora, label=label)
    report.save(run_dir / "report.json")
    print(f"removed layers {record.plan().all_removed()}")
    print(evalkit.render_reports_table([report]))
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    model, _, tokenizer = _load_model(args.checkpoint)
    try:
        grid = [int(v) for v in args.grid.split(",") if v.strip()]
    except ValueError as exc:
        raise ValidationError(f"--grid must be comma-separated integers: {exc}") from exc
    if not grid:
        raise ValidationError("--grid must name at least one value")
    section = config.section("sweep")
    metric_names = tuple(section.get("metrics", ["taylor", "bi"]))
    for name in metric_names:
        if name not in metrics.METRIC_NAMES:
            raise ValidationError(f"config field [sweep].metrics: unknown metric {name!r}")
    tasks, corpora = _eval_suite(config, tokenizer)
    corpus_path = config.path("corpus", "train")
    docs = corpus_documents(load_corpus(corpus_path), tokenizer)
    calib_section = config.section("calibration")
    sweep_config = evalkit.SweepConfig(
        model=model,
        calib_docs=docs,
        total=int(config.section("pruning").get("total", 2)),
        calib_count=int(calib_section.get("count", 10)),
        calib_seq_len=int(calib_section.get("seq_len", 128)),
        seed=config.seed,
        metrics=metric_names,
        eval_corpora=corpora or None,
        tasks=tasks or None,
        tokenizer=tokenizer,
        finetune_spec=_finetune_spec(config, tokenizer, override=args.finetune),
    )
    if args.kind == "calibration-count":
        sweep = evalkit.calibration_count_sweep(sweep_config, grid)
    elif args.kind == "prune-rate":
        sweep = evalkit.prune_rate_sweep(sweep_config, grid)
    else:
        raise ValidationError(
            "sweep --kind must be calibration-count or prune-rate; "
            "sft-dataset sweeps run via scripts/run_sft_sweep.py"
        )
    run_dir = config.output_dir
    snapshot_config(config, run_dir)
    path = sweep.save_csv(run_dir / f"sweep_{args.kind}.csv")
    for point in sweep.points:
        status = point.error or f"removed {point.removed_layers}"
        print(f"{args.kind}={point.value} metric={point.metric}: {status}")
    print(f"sweep: {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for run_dir in args.run_dirs:
        path = Path(run_dir) / "report.json"
        if not path.exists():
            raise ValidationError(f"no report.json under {run_dir}")
        reports.append(evalkit.EvalReport.from_dict(json.loads(path.read_text())))
    print(evalkit.merge_reports(reports))
    return EXIT_OK


def cmd_sample(args) -> int:
    model, _, tokenizer = _load_model(args.checkpoint)
    prompt_ids = tokenizer.encode(args.prompt, add_bos=True)
    out = greedy_generate(model, prompt_ids, args.max_new_tokens)
    print(tokenizer.decode(out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prunelab",
        description="transformer layer-pruning laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="experiment config (TOML)")
        return p

    def with_pruning_args(p):
        p.add_argument("--metric", default=None)
        p.add_argument("--strategy", default=None, choices=["one-shot", "iterative"])
        p.add_argument("--step", type=int, default=None)
        p.add_argument("--total", type=int, default=None)
        p.add_argument("--schedule", default=None, help="a:b:c shorthand (step=b, total=c)")
        return p

    with_config(sub.add_parser("train-base", help="train the base toy model"))

    p = with_config(sub.add_parser("score", help="score layers with one metric"))
    p.add_argument("--checkpoint", required=True)
    with_pruning_args(p)

    p = with_config(sub.add_parser("prune", help="score and remove layers"))
    p.add_argument("--checkpoint", required=True)
    with_pruning_args(p)

    p = with_config(sub.add_parser("finetune", help="recover a pruned checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--finetune", default=None, help="lora | partial:k | none")

    p = with_config(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--label", default=None)

    p = with_config(sub.add_parser("pipeline", help="score -> prune -> finetune -> eval"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--finetune", default=None, help="lora | partial:k | none")
    with_pruning_args(p)

    p = with_config(sub.add_parser("sweep", help="sensitivity sweeps"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", required=True, choices=list(evalkit.SWEEP_KINDS))
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--finetune", default=None)

    p = sub.add_parser("report", help="merge run reports into one table")
    p.add_argument("run_dirs", nargs="+")

    p = sub.add_parser("sample", help="greedy generation smoke test")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new-tokens", type=int, default=40)

    return parser


COMMANDS = {
    "train-base": cmd_train_base,
    "score": cmd_score,
    "prune": cmd_prune,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "sample": cmd_sample,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (
        ValidationError,
        DataError,
        pruning.PlanError,
        metrics.MetricError,
        evalkit.EvalError,
        ft.FinetuneError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # runtime failure: distinct exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
