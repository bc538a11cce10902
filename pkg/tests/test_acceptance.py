"""Acceptance criteria, one test per criterion, each printing PASS/FAIL.

Run with `pytest -s tests/test_acceptance.py -v` to watch the lines stream.
Criteria 10 and 11 drive the shipped CLI end to end on the shipped corpus and
share one trained base checkpoint through a module fixture.
"""

import json
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from prunelab import evalkit, finetune as ft, metrics, pruning
from prunelab.cli import EXIT_OK, main
from prunelab.data import CalibrationSet, build_tokenizer, corpus_documents, load_corpus, load_sft
from prunelab.data import PROMPT_WITH_INPUT
from prunelab.model import (
    TransformerModel,
    TransformerSpec,
    count_macs,
    count_params,
    load_preset,
    remove_layers,
    replace,
)
from prunelab.tensor import backward, cross_entropy, finite_difference_gradient, no_grad, seeded_rng

REPO = Path(__file__).resolve().parents[1]
DATA = REPO / "data"


@contextmanager
def criterion(number: int, budget_seconds: float, label: str):
    started = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {number:2d} FAIL  {label}")
        raise
    elapsed = time.perf_counter() - started
    print(f"ACCEPTANCE {number:2d} PASS  {label}  ({elapsed:.2f}s)")
    assert elapsed < budget_seconds, f"criterion {number} exceeded {budget_seconds}s budget"


def toy_spec(vocab=50):
    return load_preset("toy-8x64", vocab_size=vocab)


# -- 1, 2: architecture arithmetic ------------------------------------------------


def test_criterion_01_parameter_arithmetic():
    with criterion(1, 1.0, "count_params: 8.03B dense, 6.29B minus 8 layers (1%)"):
        spec = load_preset("llama-3.1-8b-like")
        dense = count_params(spec)
        pruned = count_params(spec, removed_layers=8)
        assert abs(dense - 8.03e9) / 8.03e9 < 0.01, f"dense {dense:,}"
        assert abs(pruned - 6.29e9) / 6.29e9 < 0.01, f"pruned {pruned:,}"


def test_criterion_02_mac_arithmetic():
    with criterion(2, 1.0, "count_macs: 368.65G at 64 tokens on the pruned preset (10%)"):
        spec = load_preset("llama-3.1-8b-like")
        macs = count_macs(spec, seq_len=64, removed_layers=8)
        assert abs(macs - 368.65e9) / 368.65e9 < 0.10, f"macs {macs:,}"


# -- 3: adapter zero-init and merge ------------------------------------------------


def test_criterion_03_adapter_zero_init_and_merge():
    with criterion(3, 60.0, "adapter init exact, merged vs adapted within 1e-5 x100 batches"):
        model = TransformerModel.build(toy_spec(), seed=3)
        tokens = seeded_rng(0).integers(0, 50, size=(4, 24))
        with no_grad():
            base = model.forward(tokens).data
        adapted = ft.attach_adapters(model, rank=8, alpha=16.0, seed=4)
        with no_grad():
            attached = adapted.forward(tokens).data
        assert np.array_equal(base, attached), "zero-init adapter changed the forward"

        rng = seeded_rng(5)
        for pair in adapted.adapters.pairs:
            pair.b.data = rng.normal(0, 0.03, size=pair.b.shape).astype(pair.b.data.dtype)
        merged = ft.merge_adapters(adapted)
        for batch in range(100):
            probe = seeded_rng(100 + batch).integers(0, 50, size=(2, 16))
            with no_grad():
                a = adapted.forward(probe).data
                m = merged.forward(probe).data
            assert np.max(np.abs(a - m)) <= 1e-5, f"batch {batch}: {np.max(np.abs(a - m))}"


# -- 4: taylor oracle ---------------------------------------------------------------


def test_criterion_04_taylor_finite_difference_oracle():
    with criterion(4, 60.0, "taylor equals sum|fd-grad * W| per layer within 1e-3 rel"):
        spec = TransformerSpec(
            vocab_size=5, hidden_size=2, num_layers=2, num_heads=1, num_kv_heads=1,
            head_dim=2, ffn_hidden=2, max_seq_len=16,
        )
        model = TransformerModel.build(spec, seed=6, dtype=np.float64)
        assert count_params(spec) <= 100
        rng = seeded_rng(7)
        calib = CalibrationSet(
            [list(map(int, rng.integers(0, 5, size=6))) for _ in range(3)],
            "micro", 3, 6, 7,
        )
        got = metrics.taylor_scores(model, calib)

        from prunelab.metrics import _calibration_lm_loss

        mats = [w for block in model.blocks for _, w in block.matrices()]

        def loss_fn(_):
            with no_grad():
                return _calibration_lm_loss(model, calib).item()

        fd = finite_difference_gradient(loss_fn, [w.data for w in mats], step=1e-5)
        expected, idx = [], 0
        for block in model.blocks:
            total = 0.0
            for _ in block.matrices():
                total += np.abs(fd[idx] * mats[idx].data).sum()
                idx += 1
            expected.append(total)
        np.testing.assert_allclose(got.scores, expected, rtol=1e-3)


# -- 5: BI oracle ---------------------------------------------------------------------


def test_criterion_05_bi_oracle():
    with criterion(5, 10.0, "bi equals naive double-loop cosines (1e-6); hand cases 0/2/0.5"):
        spec = TransformerSpec(
            vocab_size=11, hidden_size=8, num_layers=3, num_heads=2, num_kv_heads=1,
            head_dim=4, ffn_hidden=16, max_seq_len=16,
        )
        model = TransformerModel.build(spec, seed=8)
        rng = seeded_rng(9)
        calib = CalibrationSet(
            [list(map(int, rng.integers(0, 11, size=7))) for _ in range(4)],
            "micro", 4, 7, 9,
        )
        got = metrics.bi_scores(model, calib)

        from prunelab.metrics import _capture_streams, _mean_pairwise_cosine

        streams = _capture_streams(model, calib)
        for i in range(3):
            cosines = []
            for stream in streams:
                for t in range(stream.shape[1]):
                    x, y = stream[i, t], stream[i + 1, t]
                    cosines.append(float(x @ y / (np.linalg.norm(x) * np.linalg.norm(y))))
            assert abs(got.scores[i] - (1.0 - np.mean(cosines))) <= 1e-6

        v = np.array([1.0, 2.0, 3.0])
        a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        assert 1.0 - _mean_pairwise_cosine([np.stack([[v], [v]])])[0, 1] == 0.0
        assert 1.0 - _mean_pairwise_cosine([np.stack([[v], [-v]])])[0, 1] == 2.0
        assert 1.0 - _mean_pairwise_cosine([np.stack([[a, a], [a, b]])])[0, 1] == 0.5


# -- 6: perplexity invariants ------------------------------------------------------------


def test_criterion_06_perplexity_invariants():
    with criterion(6, 10.0, "uniform ppl = vocab (1e-6); oracle = 1; identity layer degrades 0"):
        vocab = 17
        uniform = TransformerModel.build(toy_spec(vocab), seed=10)
        uniform.lm_head.data[:] = 0.0
        docs = [list(map(int, seeded_rng(11).integers(0, vocab, size=40))) for _ in range(3)]
        assert abs(evalkit.perplexity(uniform, docs) - vocab) <= 1e-6

        class Oracle:
            spec = type("S", (), {"max_seq_len": 64})()

            def forward(self, tokens):
                tokens = np.asarray(tokens)
                logits = np.zeros(tokens.shape + (vocab,))
                for b in range(tokens.shape[0]):
                    for t in range(tokens.shape[1] - 1):
                        logits[b, t, tokens[b, t + 1]] = 1000.0
                return logits

        assert evalkit.perplexity(Oracle(), docs) == pytest.approx(1.0, abs=1e-9)

        spec = TransformerSpec(
            vocab_size=vocab, hidden_size=16, num_layers=3, num_heads=4, num_kv_heads=2,
            head_dim=4, ffn_hidden=32, max_seq_len=32,
        )
        model = TransformerModel.build(spec, seed=12)
        model.blocks[1].wo.data[:] = 0.0
        model.blocks[1].w_down.data[:] = 0.0
        calib = CalibrationSet([d[:20] for d in docs], "micro", 3, 20, 11)
        scores = metrics.ppl_scores(model, calib)
        assert scores.scores[1] == pytest.approx(scores.extras["baseline_ppl"], rel=1e-9)


# -- 7: one-shot vs iterative degenerate case ------------------------------------------


def test_criterion_07_one_shot_equals_degenerate_iterative():
    with criterion(7, 60.0, "step=total, no finetune: identical sets and weights, all 7 metrics"):
        spec = TransformerSpec(
            vocab_size=13, hidden_size=16, num_layers=6, num_heads=4, num_kv_heads=2,
            head_dim=4, ffn_hidden=32, max_seq_len=32,
        )
        model = TransformerModel.build(spec, seed=13)
        rng = seeded_rng(14)
        docs = [list(map(int, rng.integers(3, 13, size=24))) for _ in range(12)]
        for metric in metrics.METRIC_NAMES:
            source = pruning.CalibrationSource(docs, count=3, seq_len=12, seed=15)
            shot, shot_rec = pruning.one_shot_prune(model, metric, 2, source, metric_seed=16)
            alt, iter_rec = pruning.iterative_prune(
                model, metric, step=2, total=2, calib_source=source, metric_seed=16
            )
            assert shot_rec.plan().all_removed() == iter_rec.plan().all_removed(), metric
            for a, b in zip(shot.parameters(), alt.parameters()):
                assert a.data.tobytes() == b.data.tobytes(), metric


# -- 8: freeze soundness -----------------------------------------------------------------


def test_criterion_08_freeze_soundness():
    with criterion(8, 120.0, "partial training: frozen bitwise stable, grads only trainable, tied rejected"):
        corpus = load_corpus(DATA / "toy_corpus.txt")
        tokenizer = build_tokenizer(corpus + PROMPT_WITH_INPUT.format(instruction="", input=""))
        spec = replace(toy_spec(tokenizer.vocab_size), num_layers=4)
        model = TransformerModel.build(spec, seed=17)
        sft = load_sft(DATA / "toy_sft.jsonl", tokenizer, max_seq_len=96)
        sft.records = sft.records[:32]

        policy = ft.FreezePolicy("lm_head_last_k", last_k=2)
        trainable = ft.apply_freeze(model, policy)
        frozen_before = {
            n: p.data.copy()
            for n, p in model.named_parameters().items()
            if n not in trainable
        }
        tokens = seeded_rng(18).integers(0, spec.vocab_size, size=(2, 16))
        grads = backward(cross_entropy(model.forward(tokens[:, :-1]), tokens[:, 1:]))
        named = model.named_parameters()
        assert {n for n, p in named.items() if p in grads} == trainable

        ft.train(model, sft, ft.TrainConfig(
            epochs=2, batch_size=8, learning_rate=1e-3, warmup_steps=5, seed=19, max_seq_len=96,
        ))
        for name, p in model.named_parameters().items():
            if name in frozen_before:
                assert p.data.tobytes() == frozen_before[name].tobytes(), name

        tied = TransformerModel.build(replace(spec, tie_embeddings=True), seed=20)
        with pytest.raises(ft.FinetuneError, match="tied"):
            ft.apply_freeze(tied, ft.FreezePolicy("lm_head_only"))


# -- 9: trainable-count formulas -----------------------------------------------------------


def test_criterion_09_trainable_count_formulas():
    with criterion(9, 1.0, "adapter default 15.73M, head+last-3 1179.68M on pruned preset (1%)"):
        pruned = replace(load_preset("llama-3.1-8b-like"), num_layers=24)
        adapter = ft.adapter_param_count(pruned, rank=8)
        partial = ft.freeze_trainable_count(pruned, ft.FreezePolicy("lm_head_last_k", last_k=3))
        assert abs(adapter - 15.73e6) / 15.73e6 < 0.01, f"{adapter:,}"
        assert abs(partial - 1179.68e6) / 1179.68e6 < 0.01, f"{partial:,}"


# -- 10, 11: end-to-end desk recipe and sensitivity plumbing ------------------------------


def _write_config(path: Path, out_dir: Path, **overrides) -> Path:
    tasks = overrides.pop("tasks", str(DATA / "toy_tasks.jsonl"))
    body = f"""
[experiment]
seed = 0
output_dir = "{out_dir}"

[model]
preset = "toy-8x64"

[tokenizer]
kind = "char"

[corpus]
train = "{DATA / 'toy_corpus.txt'}"
eval = "{DATA / 'toy_corpus.txt'}"

[train]
steps = {overrides.pop('steps', 500)}
batch_size = 12
seq_len = 64
learning_rate = 2e-3
warmup_steps = 40

[calibration]
count = 10
seq_len = 128

[pruning]
metric = "reverse-order"
strategy = "one-shot"
total = 2
step = 1

[finetune]
method = "partial"
last_k = 3
epochs = 2
batch_size = 16
learning_rate = {overrides.pop('finetune_lr', '1e-3')}
warmup_steps = 10
max_seq_len = 160
rank = 8
alpha = 16.0

[sft]
path = "{DATA / 'toy_sft.jsonl'}"
format = "alpaca"
max_seq_len = 160

[eval]
tasks = ["{tasks}"]
ppl_max_docs = {overrides.pop('ppl_max_docs', 300)}

[sweep]
metrics = ["taylor", "bi"]
"""
    assert not overrides, f"unused overrides: {overrides}"
    path.write_text(body)
    return path


@pytest.fixture(scope="module")
def desk_base(tmp_path_factory):
    """One trained base checkpoint shared by criteria 10 and 11."""
    tmp = tmp_path_factory.mktemp("desk")
    config = _write_config(tmp / "base.toml", tmp / "base")
    started = time.perf_counter()
    assert main(["train-base", "--config", str(config)]) == EXIT_OK
    train_seconds = time.perf_counter() - started
    ckpt = tmp / "base" / "checkpoints" / "base.ckpt"
    assert ckpt.exists()
    return tmp, ckpt, train_seconds


def test_criterion_10_end_to_end_desk_recipe(desk_base):
    with criterion(10, 1800.0, "desk recipe: train, prune 25%, partial:3 and lora recover ppl"):
        tmp, ckpt, train_seconds = desk_base
        assert train_seconds < 1200.0, f"base training took {train_seconds:.0f}s (>20min)"

        runs = {}
        for variant in ("partial:3", "lora"):
            out = tmp / f"recipe_{variant.replace(':', '')}"
            config = _write_config(tmp / f"{out.name}.toml", out)
            code = main([
                "pipeline", "--config", str(config), "--checkpoint", str(ckpt),
                "--metric", "reverse-order", "--total", "2", "--finetune", variant,
            ])
            assert code == EXIT_OK, variant
            report = json.loads((out / "report.json").read_text())
            record = json.loads((out / "record.json").read_text())
            assert record["final_layer_count"] == 6
            removed = sorted(i for r in record["rounds"] for i in r["removed_original"])
            assert removed == [6, 7], f"reverse-order 25% must cut the final quarter, got {removed}"
            assert report["average_accuracy"] is not None  # Table-1-shaped report
            assert report["perplexities"], "report carries perplexity columns"
            runs[variant] = report

        # unrecovered pruned baseline, same eval suite
        out = tmp / "recipe_none"
        config = _write_config(tmp / "none.toml", out)
        assert main([
            "pipeline", "--config", str(config), "--checkpoint", str(ckpt),
            "--metric", "reverse-order", "--total", "2", "--finetune", "none",
        ]) == EXIT_OK
        unrecovered = json.loads((out / "report.json").read_text())

        corpus_key = next(iter(unrecovered["perplexities"]))
        pruned_ppl = unrecovered["perplexities"][corpus_key]
        partial_ppl = runs["partial:3"]["perplexities"][corpus_key]
        lora_ppl = runs["lora"]["perplexities"][corpus_key]
        assert partial_ppl < pruned_ppl, f"partial {partial_ppl} vs pruned {pruned_ppl}"
        assert lora_ppl < pruned_ppl, f"lora {lora_ppl} vs pruned {pruned_ppl}"

        # recorded, not asserted: which recovery method wins at toy scale
        comparison = {
            "pruned_unrecovered_ppl": pruned_ppl,
            "partial_ppl": partial_ppl,
            "lora_ppl": lora_ppl,
            "partial_avg_acc": runs["partial:3"]["average_accuracy"],
            "lora_avg_acc": runs["lora"]["average_accuracy"],
            "partial_beats_lora_on_ppl": partial_ppl < lora_ppl,
            "partial_beats_lora_on_acc": (
                runs["partial:3"]["average_accuracy"] >= runs["lora"]["average_accuracy"]
            ),
        }
        (tmp / "partial_vs_lora.json").write_text(json.dumps(comparison, indent=2))
        print(f"  recorded partial-vs-lora: {comparison}")


def test_criterion_11_sensitivity_plumbing(desk_base):
    with criterion(11, 1800.0, "calibration sweep {1,5,10,30,50} x {taylor,bi}, rerun-identical"):
        tmp, ckpt, _ = desk_base
        from prunelab.cli import _load_model

        model, _, tokenizer = _load_model(ckpt)
        docs = corpus_documents(load_corpus(DATA / "toy_corpus.txt"), tokenizer)

        def run_once():
            config = evalkit.SweepConfig(
                model=model,
                calib_docs=docs,
                total=2,
                calib_seq_len=128,
                seed=0,
                metrics=("taylor", "bi"),
                eval_corpora={"toy_corpus": docs[:100]},
            )
            return evalkit.calibration_count_sweep(config, [1, 5, 10, 30, 50])

        first = run_once()
        second = run_once()
        assert len(first.points) == 10  # 5 counts x 2 metrics
        for point in first.points:
            assert point.error is None
            assert point.removed_layers and len(point.removed_layers) == 2
            assert point.metric in ("taylor", "bi")
            assert "toy_corpus" in point.perplexities
        assert [p.removed_layers for p in first.points] == [
            p.removed_layers for p in second.points
        ]
        assert [p.perplexities for p in first.points] == [
            p.perplexities for p in second.points
        ]
        rows = first.to_rows()
        assert {r["value"] for r in rows} == {1, 5, 10, 30, 50}
