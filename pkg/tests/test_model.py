import numpy as np
import pytest

from prunelab import tensor as T
from prunelab.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from prunelab.model import (
    Block,
    TransformerModel,
    TransformerSpec,
    block_forward,
    count_macs,
    count_params,
    greedy_generate,
    load_preset,
    remove_layers,
)
from prunelab.optim import AdamW, AdamWConfig
from prunelab.tensor import ShapeError, backward, cross_entropy, seeded_rng


def toy_spec(layers=4, vocab=11, tie=False):
    return TransformerSpec(
        vocab_size=vocab, hidden_size=16, num_layers=layers, num_heads=4,
        num_kv_heads=2, head_dim=4, ffn_hidden=32, max_seq_len=32,
        tie_embeddings=tie,
    )


def toy_model(layers=4, vocab=11, tie=False, seed=0):
    return TransformerModel.build(toy_spec(layers, vocab, tie), seed=seed)


def rand_tokens(model, batch=2, seq=7, seed=0):
    rng = seeded_rng(seed)
    return rng.integers(0, model.spec.vocab_size, size=(batch, seq))


def test_spec_validation():
    with pytest.raises(ValueError):
        toy_spec()  # baseline valid
        TransformerSpec(11, 16, 4, 3, 2, 4, 32, 32)  # heads*dim != hidden
    with pytest.raises(ValueError):
        TransformerSpec(11, 16, 4, 4, 3, 4, 32, 32)  # kv does not divide heads


def test_zero_layer_model_is_head_of_norm_of_embedding():
    spec = TransformerSpec(11, 16, 0, 4, 2, 4, 32, 32)
    model = TransformerModel.build(spec, seed=2)
    tokens = np.array([[1, 5, 9]])
    with T.no_grad():
        got = model.forward(tokens).data
        expected = T.linear(
            T.rms_norm(T.embedding(model.embedding, tokens), model.final_norm), model.lm_head
        ).data
    np.testing.assert_array_equal(got, expected)


def test_forward_composition_matches_manual_fold():
    model = toy_model()
    tokens = rand_tokens(model)
    with T.no_grad():
        full = model.forward(tokens).data
        x = T.embedding(model.embedding, tokens)
        for block in model.blocks:
            x = block_forward(x, block, model.spec)
        manual = T.linear(T.rms_norm(x, model.final_norm), model.lm_head).data
    np.testing.assert_allclose(full, manual, atol=1e-6)


def test_forward_batch_permutation_equivariance():
    model = toy_model()
    tokens = rand_tokens(model, batch=4)
    with T.no_grad():
        logits = model.forward(tokens).data
        perm = np.array([2, 0, 3, 1])
        permuted = model.forward(tokens[perm]).data
    np.testing.assert_array_equal(permuted, logits[perm])


def test_forward_causality_under_random_suffix_edits():
    model = toy_model()
    rng = seeded_rng(3)
    tokens = rand_tokens(model, batch=1, seq=12)
    with T.no_grad():
        base = model.forward(tokens).data
    for t in (0, 4, 9):
        edited = tokens.copy()
        edited[0, t + 1:] = rng.integers(0, model.spec.vocab_size, size=12 - t - 1)
        with T.no_grad():
            alt = model.forward(edited).data
        np.testing.assert_array_equal(alt[0, : t + 1], base[0, : t + 1])


def test_forward_rejects_bad_tokens():
    model = toy_model()
    with pytest.raises(ShapeError):
        model.forward(np.array([[0, model.spec.vocab_size]]))
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, model.spec.max_seq_len + 1), dtype=int))


def test_hidden_capture_counts_and_tap_points():
    model = toy_model(layers=3)
    tokens = rand_tokens(model)
    with T.no_grad():
        logits, hidden = model.forward(tokens, capture_hidden=True)
    assert len(hidden) == 4  # inputs to 3 blocks plus post-final stream
    assert all(h.shape == (2, 7, 16) for h in hidden)
    with T.no_grad():
        embedded = T.embedding(model.embedding, tokens).data
    np.testing.assert_array_equal(hidden[0], embedded)


# -- remove_layers -----------------------------------------------------------


def test_remove_nothing_is_identity():
    model = toy_model()
    clone = remove_layers(model, set())
    tokens = rand_tokens(model)
    with T.no_grad():
        np.testing.assert_array_equal(model.forward(tokens).data, clone.forward(tokens).data)


def test_remove_tail_matches_manual_composition():
    model = toy_model(layers=8)
    pruned = remove_layers(model, {6, 7})
    assert pruned.spec.num_layers == 6
    tokens = rand_tokens(model)
    with T.no_grad():
        got = pruned.forward(tokens).data
        x = T.embedding(model.embedding, tokens)
        for block in model.blocks[:6]:
            x = block_forward(x, block, model.spec)
        expected = T.linear(T.rms_norm(x, model.final_norm), model.lm_head).data
    np.testing.assert_allclose(got, expected, atol=1e-6)


def test_remove_layers_keeps_survivors_bit_identical_and_original_untouched():
    model = toy_model(layers=5)
    before = {name: p.data.copy() for name, p in model.named_parameters().items()}
    pruned = remove_layers(model, {1, 3})
    for name, p in model.named_parameters().items():
        assert p.data.tobytes() == before[name].tobytes()
    survivors = [0, 2, 4]
    for new_i, old_i in enumerate(survivors):
        for role, tensor in pruned.blocks[new_i].named():
            assert tensor.data.tobytes() == getattr(model.blocks[old_i], role).data.tobytes()


def test_remove_layers_errors():
    model = toy_model(layers=3)
    with pytest.raises(ValueError):
        remove_layers(model, {0, 1, 2})
    with pytest.raises(ValueError):
        remove_layers(model, {3})
    with pytest.raises(ValueError):
        remove_layers(model, {-1})


# -- counting ----------------------------------------------------------------


def test_count_params_matches_built_model_exactly():
    for tie in (False, True):
        spec = toy_spec(layers=3, tie=tie)
        model = TransformerModel.build(spec)
        reachable = sum(p.size for p in model.named_parameters().values())
        assert count_params(spec) == reachable


def test_count_params_zero_layers_is_embed_norm_head():
    spec = TransformerSpec(11, 16, 0, 4, 2, 4, 32, 32)
    assert count_params(spec) == 11 * 16 * 2 + 16


def test_count_params_tied_reported_both_ways():
    spec = toy_spec(layers=2, tie=True)
    once = count_params(spec)
    twice = count_params(spec, count_tied_twice=True)
    assert twice - once == spec.vocab_size * spec.hidden_size
    assert once == sum(p.size for p in TransformerModel.build(spec).parameters())


def test_count_params_llama_preset_table_values():
    spec = load_preset("llama-3.1-8b-like")
    assert abs(count_params(spec) - 8.03e9) / 8.03e9 < 0.01
    assert abs(count_params(spec, removed_layers=8) - 6.29e9) / 6.29e9 < 0.01


def test_remove_eight_layers_from_llama_spec_parameter_count():
    spec = load_preset("llama-3.1-8b-like")
    pruned_total = count_params(spec, removed_layers=8)
    assert abs(pruned_total - 6.29e9) / 6.29e9 < 0.01


def test_count_macs_linear_in_depth():
    base = toy_spec(layers=4)
    double = toy_spec(layers=8)
    head = 64 * base.hidden_size * base.vocab_size
    assert count_macs(double, 64) - head == 2 * (count_macs(base, 64) - head)


def test_count_macs_matches_instrumented_forward():
    model = toy_model(layers=2)
    tokens = rand_tokens(model, batch=1, seq=9)
    with T.no_grad(), T.matmul_mac_counter() as counter:
        model.forward(tokens)
    assert counter.total == count_macs(model.spec, seq_len=9)


def test_count_macs_pruned_llama_matches_table_within_ten_percent():
    spec = load_preset("llama-3.1-8b-like")
    got = count_macs(spec, seq_len=64, removed_layers=8)
    assert abs(got - 368.65e9) / 368.65e9 < 0.10


# -- weight tying ------------------------------------------------------------


def test_tied_model_shares_storage_and_updates():
    model = toy_model(tie=True)
    assert model.lm_head is model.embedding
    model.lm_head.data[0, 0] += 1.0
    assert model.embedding.data[0, 0] == model.lm_head.data[0, 0]
    names = model.named_parameters()
    assert "lm_head" not in names  # tied storage listed once


# -- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = toy_model(seed=5)
    path = save_checkpoint(model, tmp_path / "m.ckpt", meta={"seed": 5, "step": 12})
    loaded, meta = load_checkpoint(path)
    assert meta == {"seed": 5, "step": 12}
    for name, p in model.named_parameters().items():
        assert loaded.named_parameters()[name].data.tobytes() == p.data.tobytes()
    tokens = rand_tokens(model)
    with T.no_grad():
        np.testing.assert_array_equal(model.forward(tokens).data, loaded.forward(tokens).data)


def test_checkpoint_save_load_save_is_byte_identical(tmp_path):
    model = toy_model(seed=6)
    first = save_checkpoint(model, tmp_path / "a.ckpt", meta={"seed": 6})
    loaded, meta = load_checkpoint(first)
    second = save_checkpoint(loaded, tmp_path / "b.ckpt", meta=meta)
    assert first.read_bytes() == second.read_bytes()


def test_checkpoint_truncation_fails_checksum(tmp_path):
    model = toy_model()
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    raw = path.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[: len(raw) - 9])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.ckpt")


def test_checkpoint_version_mismatch(tmp_path):
    model = toy_model()
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_checkpoint_tied_round_trip(tmp_path):
    model = toy_model(tie=True, seed=7)
    loaded, _ = load_checkpoint(save_checkpoint(model, tmp_path / "t.ckpt"))
    assert loaded.lm_head is loaded.embedding


# -- greedy sampler ----------------------------------------------------------


def test_greedy_zero_new_tokens_returns_prompt():
    model = toy_model()
    assert greedy_generate(model, [1, 2, 3], 0) == [1, 2, 3]


def test_greedy_is_deterministic():
    model = toy_model()
    a = greedy_generate(model, [1, 2], 6)
    b = greedy_generate(model, [1, 2], 6)
    assert a == b


def test_greedy_rejects_overlong_total_length():
    model = toy_model()
    with pytest.raises(ValueError, match="max sequence length"):
        greedy_generate(model, [1, 2], model.spec.max_seq_len)
    with pytest.raises(ValueError, match="nonempty"):
        greedy_generate(model, [], 4)


def test_greedy_overfit_model_reproduces_sentence():
    spec = TransformerSpec(
        vocab_size=9, hidden_size=16, num_layers=2, num_heads=4, num_kv_heads=2,
        head_dim=4, ffn_hidden=32, max_seq_len=16,
    )
    model = TransformerModel.build(spec, seed=1)
    sentence = [1, 4, 2, 7, 3, 5, 8, 2, 6]
    tokens = np.asarray([sentence])
    opt = AdamW(model.parameters(), AdamWConfig(learning_rate=3e-3, warmup_steps=10))
    for _ in range(300):
        logits = model.forward(tokens[:, :-1])
        loss = cross_entropy(logits, tokens[:, 1:])
        opt.step(backward(loss))
    assert greedy_generate(model, sentence[:2], len(sentence) - 2) == sentence
