#!/usr/bin/env python3
"""Calibration-sample sensitivity sweep for the data-driven metrics.

For each sample count in the grid, scores and prunes with Taylor and BI,
then reports the removed-layer sets and measurements -- the shape of the
calibration-count sensitivity table.
"""

import argparse
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from prunelab.cli import main  # noqa: E402

RUNS = ROOT / "runs"
CONFIG = ROOT / "configs" / "toy.toml"


def main_script() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--checkpoint", default=str(RUNS / "toy-base" / "checkpoints" / "base.ckpt"))
    parser.add_argument("--grid", default="1,5,10,30,50")
    args = parser.parse_args()

    if not Path(args.checkpoint).exists():
        print(f"no checkpoint at {args.checkpoint}; run scripts/run_desk_recipe.py first",
              file=sys.stderr)
        return 2

    cfg_text = CONFIG.read_text().replace(
        'output_dir = "../runs/toy-base"', 'output_dir = "../runs/calibration-sweep"'
    )
    cfg = ROOT / "configs" / "_generated_calibration_sweep.toml"
    cfg.write_text(cfg_text)
    return main([
        "sweep", "--config", str(cfg), "--checkpoint", args.checkpoint,
        "--kind", "calibration-count", "--grid", args.grid,
    ])


if __name__ == "__main__":
    sys.exit(main_script())
