#!/usr/bin/env python3
"""Regenerate the shipped desk-scale fixtures: corpus, SFT set, eval tasks.

The corpus is a synthetic "expedition log". Word relationships are
deterministic (each sky word forces one crew word, each wind word one sail
setting) and every entry repeats its day number at the end ("mark N"), a
long-range copy that gives the deeper layers of a small model real work, so
layer pruning visibly hurts perplexity and recovery fine-tuning visibly
helps. Each corpus line holds two entries so training windows start at
varied positions.
"""

import json
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "data"

WINDS = ["calm", "brisk", "fierce", "gusty"]
SKIES = ["clear", "cloudy", "stormy", "hazy"]
# forced continuations: sky -> crew mood, wind -> sail setting
CREW_OF = {"clear": "glad", "cloudy": "quiet", "stormy": "tense", "hazy": "wary"}
SAIL_OF = {"calm": "full", "brisk": "high", "fierce": "reefed", "gusty": "low"}

ENTRY = "day {day} : wind {wind} , sail {sail} , sky {sky} , crew {crew} , mark {day} ."


def make_entry(rng) -> str:
    wind = WINDS[rng.integers(len(WINDS))]
    sky = SKIES[rng.integers(len(SKIES))]
    return ENTRY.format(
        day=int(rng.integers(1, 400)),
        wind=wind,
        sail=SAIL_OF[wind],
        sky=sky,
        crew=CREW_OF[sky],
    )


def main() -> int:
    DATA.mkdir(exist_ok=True)
    rng = np.random.default_rng(20240901)

    lines = [make_entry(rng) + " " + make_entry(rng) for _ in range(2600)]
    (DATA / "toy_corpus.txt").write_text("\n".join(lines) + "\n")

    # SFT: write a fresh log entry; responses follow the corpus grammar, so
    # recovery fine-tuning moves corpus perplexity.
    sft = []
    for _ in range(200):
        sft.append(
            {
                "instruction": "write one log line",
                "input": "",
                "output": make_entry(rng),
            }
        )
    with open(DATA / "toy_sft.jsonl", "w") as fh:
        for record in sft:
            fh.write(json.dumps(record) + "\n")

    # eval task: pick the crew word forced by the sky word (4 choices)
    items = []
    crew_words = sorted(set(CREW_OF.values()))
    for _ in range(200):
        line = make_entry(rng)
        head = line[: line.index(" crew ") + len(" crew")]
        sky = next(s for s in SKIES if f"sky {s}" in line)
        gold = CREW_OF[sky]
        items.append(
            {
                "context": head,
                "choices": [" " + w for w in crew_words],
                "answer": crew_words.index(gold),
            }
        )
    with open(DATA / "toy_tasks.jsonl", "w") as fh:
        for item in items:
            fh.write(json.dumps(item) + "\n")

    print(f"wrote {len(lines)} corpus lines, {len(sft)} sft records, {len(items)} eval items")
    return 0


if __name__ == "__main__":
    sys.exit(main())
