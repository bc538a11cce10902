#!/usr/bin/env python3
"""SFT-dataset sensitivity sweep: prune once, recover with each dataset.

Pass one or more SFT JSONL paths; each is used for partial-layer recovery of
the same reverse-order-pruned model, and the resulting measurements land in
one CSV for comparison.
"""

import argparse
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from prunelab import evalkit, finetune as ft, pruning  # noqa: E402
from prunelab.cli import _load_model  # noqa: E402
from prunelab.data import corpus_documents, load_corpus, load_sft  # noqa: E402

RUNS = ROOT / "runs"


def main_script() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("datasets", nargs="+", help="SFT JSONL paths")
    parser.add_argument("--checkpoint", default=str(RUNS / "toy-base" / "checkpoints" / "base.ckpt"))
    parser.add_argument("--format", default="alpaca", choices=["alpaca", "dolly"])
    parser.add_argument("--total", type=int, default=2)
    parser.add_argument("--last-k", type=int, default=3)
    parser.add_argument("--out", default=str(RUNS / "sft-sweep" / "sweep_sft-dataset.csv"))
    args = parser.parse_args()

    if not Path(args.checkpoint).exists():
        print(f"no checkpoint at {args.checkpoint}; run scripts/run_desk_recipe.py first",
              file=sys.stderr)
        return 2

    model, _, tokenizer = _load_model(args.checkpoint)
    docs = corpus_documents(load_corpus(ROOT / "data" / "toy_corpus.txt"), tokenizer)
    datasets = [load_sft(p, tokenizer, format=args.format, max_seq_len=160) for p in args.datasets]

    config = evalkit.SweepConfig(
        model=model,
        calib_docs=docs,
        total=args.total,
        seed=0,
        metrics=("reverse-order",),
        eval_corpora={"toy_corpus": docs[:300]},
    )

    def make_spec(dataset):
        return pruning.FinetuneSpec(
            method="partial",
            last_k=args.last_k,
            dataset=dataset,
            train_config=ft.TrainConfig(
                epochs=2, batch_size=16, learning_rate=1e-3, warmup_steps=10,
                seed=0, max_seq_len=160,
            ),
        )

    sweep = evalkit.sft_dataset_sweep(config, datasets, make_spec)
    path = sweep.save_csv(args.out)
    for point in sweep.points:
        status = point.error or f"ppl {point.perplexities}"
        print(f"dataset={point.value}: {status}")
    print(f"sweep: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main_script())
