import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunelab.data import (
    DataError,
    Tokenizer,
    build_tokenizer,
    batch_records,
    corpus_documents,
    load_eval_task,
    load_sft,
    render_prompt,
    sample_calibration,
    SPECIALS,
)

DATA_DIR = Path(__file__).resolve().parents[1] / "data"


def test_char_tokenizer_vocab_from_corpus():
    tok = build_tokenizer("abab")
    assert tok.entries == list(SPECIALS) + ["a", "b"]
    assert tok.vocab_size == 5


def test_encode_decode_round_trip():
    tok = build_tokenizer("the quick brown fox")
    assert tok.decode(tok.encode("the fox")) == "the fox"
    assert tok.decode(tok.encode("quick", add_bos=True, add_eos=True)) == "quick"


@given(st.text(min_size=1, max_size=50))
@settings(max_examples=50, deadline=None)
def test_byte_tokenizer_round_trips_any_text(text):
    tok = build_tokenizer("x", kind="byte")
    assert tok.decode(tok.encode(text)) == text


def test_unknown_char_rejected():
    tok = build_tokenizer("ab")
    with pytest.raises(DataError):
        tok.encode("abc")


def test_empty_corpus_rejected():
    with pytest.raises(DataError):
        build_tokenizer("")


def test_vocab_file_round_trip_and_determinism(tmp_path):
    corpus = "hello\nworld\n"
    first = build_tokenizer(corpus).save_vocab(tmp_path / "a.vocab")
    second = build_tokenizer(corpus).save_vocab(tmp_path / "b.vocab")
    assert first.read_bytes() == second.read_bytes()
    loaded = Tokenizer.load_vocab(first)
    assert loaded.entries == build_tokenizer(corpus).entries


# -- calibration sampling -----------------------------------------------------


def _docs(rng, count=6, length=40, vocab=20):
    return [list(rng.integers(3, vocab, size=length)) for _ in range(count)]


def test_calibration_defaults_shape():
    docs = _docs(np.random.default_rng(0), count=12, length=200)
    calib = sample_calibration(docs, count=10, seq_len=128, seed=4)
    assert calib.sample_count == 10 and len(calib.sequences) == 10
    assert all(len(s) <= 128 for s in calib.sequences)


def test_calibration_seed_determinism():
    docs = _docs(np.random.default_rng(1))
    a = sample_calibration(docs, count=4, seq_len=16, seed=9)
    b = sample_calibration(docs, count=4, seq_len=16, seed=9)
    c = sample_calibration(docs, count=4, seq_len=16, seed=10)
    assert a.sequences == b.sequences
    assert a.sequences != c.sequences


def test_calibration_single_window_corpus():
    calib = sample_calibration([[5, 6, 7]], count=1, seq_len=16, seed=0)
    assert calib.sequences == [[5, 6, 7]]


def test_calibration_too_small_corpus():
    with pytest.raises(DataError):
        sample_calibration([[5, 6, 7]], count=2, seq_len=16, seed=0)


def test_calibration_windows_are_contiguous_spans():
    doc = list(range(3, 60))
    calib = sample_calibration([doc], count=5, seq_len=8, seed=2)
    for seq in calib.sequences:
        start = doc.index(seq[0])
        assert doc[start : start + 8] == seq


# -- SFT -----------------------------------------------------------------------


def _write_sft(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")


def test_load_sft_masks_cover_response_only(tmp_path):
    tok = build_tokenizer("abcdefghijklmnopqrstuvwxyz :\n#IR")
    records = [
        {"instruction": "say hi", "input": "", "output": "hi"},
        {"instruction": "echo", "input": "abc", "output": "abc"},
        {"instruction": "count", "input": "", "output": "one two"},
    ]
    path = tmp_path / "sft.jsonl"
    _write_sft(path, records)
    ds = load_sft(path, tok, format="alpaca", max_seq_len=128)
    assert len(ds) == 3
    for record, raw in zip(ds.records, records):
        expected_response = len(tok.encode(raw["output"], add_eos=True))
        assert sum(record.loss_mask) == expected_response
        prompt_len = len(tok.encode(render_prompt(raw["instruction"], raw["input"]), add_bos=True))
        assert all(m == 0.0 for m in record.loss_mask[:prompt_len])


def test_load_sft_truncates_to_exact_max_len(tmp_path):
    tok = build_tokenizer("abcdefghijklmnopqrstuvwxyz :\n#IR")
    _write_sft(tmp_path / "sft.jsonl", [
        {"instruction": "repeat", "input": "", "output": "abc" * 400},
    ])
    ds = load_sft(tmp_path / "sft.jsonl", tok, max_seq_len=512)
    assert len(ds.records[0].token_ids) == 512
    assert len(ds.records[0].loss_mask) == 512


def test_load_sft_rejects_empty_response_with_line_number(tmp_path):
    tok = build_tokenizer("abcdefghijklmnopqrstuvwxyz :\n#IR")
    _write_sft(tmp_path / "sft.jsonl", [
        {"instruction": "ok", "input": "", "output": "fine"},
        {"instruction": "bad", "input": "", "output": ""},
    ])
    with pytest.raises(DataError, match="sft.jsonl:2"):
        load_sft(tmp_path / "sft.jsonl", tok)


def test_load_sft_reports_malformed_line(tmp_path):
    (tmp_path / "sft.jsonl").write_text('{"instruction": "a", "output": "b"}\nnot json\n')
    tok = build_tokenizer("abcdefghijklmnopqrstuvwxyz :\n#IR")
    with pytest.raises(DataError, match=":2"):
        load_sft(tmp_path / "sft.jsonl", tok)


def test_load_sft_missing_field_named(tmp_path):
    _write_sft(tmp_path / "sft.jsonl", [{"instruction": "a"}])
    tok = build_tokenizer("abcdefghijklmnopqrstuvwxyz :\n#IR")
    with pytest.raises(DataError, match="output"):
        load_sft(tmp_path / "sft.jsonl", tok)


def test_load_sft_dolly_field_names(tmp_path):
    tok = build_tokenizer("abcdefghijklmnopqrstuvwxyz :\n#IR")
    _write_sft(tmp_path / "sft.jsonl", [
        {"instruction": "say", "context": "abc", "response": "def"},
    ])
    ds = load_sft(tmp_path / "sft.jsonl", tok, format="dolly")
    assert ds.records[0].input == "abc"
    assert ds.records[0].response == "def"


def test_batch_records_pads_right():
    tok = build_tokenizer("abcdefghijklmnopqrstuvwxyz :\n#IR")
    import prunelab.data as D

    records = [
        D.SftRecord("i", "", "ab", tok.encode("xab"), [0.0, 1.0, 1.0]),
        D.SftRecord("i", "", "a", tok.encode("xa"), [0.0, 1.0]),
    ]
    tokens, mask = batch_records(records)
    assert tokens.shape == (2, 3)
    assert tokens[1, 2] == 0  # pad id
    assert mask[1, 2] == 0.0


# -- eval tasks -----------------------------------------------------------------


def test_eval_task_accepts_valid_items(tmp_path):
    lines = [
        {"context": "q1", "choices": ["a", "b", "c", "d"], "answer": 3},
        {"context": "q2", "choices": ["x", "y"], "answer": 0},
    ]
    (tmp_path / "t.jsonl").write_text("\n".join(json.dumps(l) for l in lines))
    task = load_eval_task(tmp_path / "t.jsonl")
    assert len(task.items) == 2
    assert task.items[0].answer == 3


def test_eval_task_rejects_out_of_range_answer(tmp_path):
    (tmp_path / "t.jsonl").write_text(
        json.dumps({"context": "q", "choices": ["a", "b", "c", "d"], "answer": 5})
    )
    with pytest.raises(DataError, match="answer 5"):
        load_eval_task(tmp_path / "t.jsonl")


def test_eval_task_rejects_single_choice(tmp_path):
    (tmp_path / "t.jsonl").write_text(
        json.dumps({"context": "q", "choices": ["only"], "answer": 0})
    )
    with pytest.raises(DataError, match="2 choices"):
        load_eval_task(tmp_path / "t.jsonl")


def test_shipped_toy_task_has_200_items():
    task = load_eval_task(DATA_DIR / "toy_tasks.jsonl")
    assert len(task.items) == 200


def test_corpus_documents_split_on_lines():
    tok = build_tokenizer("ab\ncd\n")
    docs = corpus_documents("ab\ncd\n\n", tok)
    assert len(docs) == 2
    assert all(len(d) == 2 for d in docs)
