#!/usr/bin/env python3
"""Prune with each of the seven metrics and merge the reports into one grid.

Mirrors the metric-comparison layout: one row per metric, the best cell per
column starred. Requires a trained base checkpoint (run train-base or
scripts/run_desk_recipe.py first); pass --finetune to recover each variant
before evaluation.
"""

import argparse
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from prunelab.cli import main  # noqa: E402
from prunelab.metrics import METRIC_NAMES  # noqa: E402

RUNS = ROOT / "runs"
CONFIG = ROOT / "configs" / "toy.toml"


def run(argv):
    code = main(argv)
    if code != 0:
        raise SystemExit(code)


def main_script() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--checkpoint", default=str(RUNS / "toy-base" / "checkpoints" / "base.ckpt"))
    parser.add_argument("--total", type=int, default=2)
    parser.add_argument("--finetune", default="none", help="lora | partial:k | none")
    args = parser.parse_args()

    if not Path(args.checkpoint).exists():
        print(f"no checkpoint at {args.checkpoint}; run scripts/run_desk_recipe.py first",
              file=sys.stderr)
        return 2

    run_dirs = []
    for metric in METRIC_NAMES:
        name = f"grid-{metric}"
        cfg_text = CONFIG.read_text().replace(
            'output_dir = "../runs/toy-base"', f'output_dir = "../runs/{name}"'
        )
        cfg = ROOT / "configs" / f"_generated_{name}.toml"
        cfg.write_text(cfg_text)
        print(f"== {metric} ==")
        run([
            "pipeline", "--config", str(cfg), "--checkpoint", args.checkpoint,
            "--metric", metric, "--total", str(args.total), "--finetune", args.finetune,
        ])
        run_dirs.append(str(RUNS / name))

    print("== metric comparison grid ==")
    run(["report"] + run_dirs)
    return 0


if __name__ == "__main__":
    sys.exit(main_script())
