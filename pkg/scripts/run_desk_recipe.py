#!/usr/bin/env python3
"""The recommended desk recipe, end to end.

Trains the 8x64 toy model on the shipped corpus (once; reuses the checkpoint
if present), prunes the final 25% of layers in reverse order, recovers with
head+last-3 partial fine-tuning and with rank-8 adapters, and prints the
comparison table plus the unrecovered pruned baseline.
"""

import json
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from prunelab.cli import main  # noqa: E402

RUNS = ROOT / "runs"
BASE = RUNS / "toy-base"
CONFIG = ROOT / "configs" / "toy.toml"


def run(argv):
    code = main(argv)
    if code != 0:
        raise SystemExit(code)


def variant_config(name: str) -> Path:
    text = CONFIG.read_text().replace(
        'output_dir = "../runs/toy-base"', f'output_dir = "../runs/{name}"'
    )
    path = ROOT / "configs" / f"_generated_{name}.toml"
    path.write_text(text)
    return path


def main_script() -> int:
    checkpoint = BASE / "checkpoints" / "base.ckpt"
    if not checkpoint.exists():
        print("== training base model ==")
        run(["train-base", "--config", str(CONFIG)])
    else:
        print(f"== reusing {checkpoint} ==")

    run_dirs = []
    for variant, flag in [("recipe-partial", "partial:3"), ("recipe-lora", "lora"),
                          ("recipe-none", "none")]:
        print(f"== pipeline: reverse-order 25%, finetune {flag} ==")
        cfg = variant_config(variant)
        run([
            "pipeline", "--config", str(cfg), "--checkpoint", str(checkpoint),
            "--metric", "reverse-order", "--total", "2", "--finetune", flag,
        ])
        run_dirs.append(str(RUNS / variant))

    print("== comparison ==")
    run(["report"] + run_dirs)

    reports = {
        d: json.loads((Path(d) / "report.json").read_text()) for d in run_dirs
    }
    corpus = next(iter(next(iter(reports.values()))["perplexities"]))
    pruned = reports[str(RUNS / "recipe-none")]["perplexities"][corpus]
    partial = reports[str(RUNS / "recipe-partial")]["perplexities"][corpus]
    lora = reports[str(RUNS / "recipe-lora")]["perplexities"][corpus]
    print(f"\nppl on {corpus}: unrecovered {pruned:.4f}, partial {partial:.4f}, lora {lora:.4f}")
    print(f"partial recovers: {partial < pruned};  lora recovers: {lora < pruned}")
    print(f"recorded direction (partial vs lora on ppl): "
          f"{'partial better' if partial < lora else 'lora better'}")
    return 0


if __name__ == "__main__":
    sys.exit(main_script())
