import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from moetune.data import (
    DIALECTS, InstructionExample, SpanTag, load_examples, pack_batch, pack_example, pack_text_batch,
    prompt_tokens, synth_corpus, synth_dataset, write_jsonl,
)
from moetune.tokenizer import BOS, EOS, PAD, SEP, VOCAB_SIZE, decode_text, detokenize, encode, tokenize


# ---------------------------------------------------------------- tokenizer


def test_framing():
    assert tokenize("") == [BOS, EOS]
    assert tokenize("ab") == [BOS, 97, 98, EOS]


@given(st.binary(max_size=64))
def test_bytes_round_trip(b):
    assert detokenize(tokenize(b)) == b


@given(st.text(max_size=32))
def test_text_round_trip(s):
    assert decode_text(tokenize(s)) == s


def test_control_tokens_outside_byte_range():
    assert sorted({PAD, BOS, EOS, SEP}) == [256, 257, 258, 259]
    assert VOCAB_SIZE == 260


# ---------------------------------------------------------------- records


def test_example_validation():
    with pytest.raises(ValueError):
        InstructionExample("i", "c", "Maybe", "reentrancy", "e")
    with pytest.raises(ValueError):
        InstructionExample("i", "c", "Safe", "front-running", "e")
    with pytest.raises(ValueError):
        InstructionExample("i", "c", "Safe", "reentrancy", "  ").validate_for_training()


def test_jsonl_round_trip(tmp_path):
    exs = synth_dataset(6, seed=3)
    write_jsonl(tmp_path / "d.jsonl", exs)
    assert load_examples(tmp_path / "d.jsonl") == exs


def test_jsonl_errors(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"instruction": "x"}\n')
    with pytest.raises(ValueError, match="missing"):
        load_examples(p)
    p.write_text("{bad\n")
    with pytest.raises(ValueError, match=":1:"):
        load_examples(p)


# ---------------------------------------------------------------- synthetic corpus


def test_dataset_is_seeded_and_balanced():
    a, b = synth_dataset(40, seed=1), synth_dataset(40, seed=1)
    assert a == b
    assert a != synth_dataset(40, seed=2)
    assert Counter(e.vulnerability_type for e in a) == {t: 10 for t in DIALECTS}
    assert set(e.label for e in a) == {"Vulnerable", "Safe"}
    assert len({e.id for e in a}) == 40


def test_dialects_use_disjoint_function_names():
    names = {}
    for e in synth_dataset(200, seed=0):
        fn = e.code.split()[1].rstrip("(){}0123456789")
        names.setdefault(fn, set()).add(e.vulnerability_type)
    assert all(len(v) == 1 for v in names.values())


def test_corpus_contains_answer_format():
    docs = synth_corpus(8, seed=0)
    assert len(docs) == 8
    assert all("LABEL: " in d for d in docs)


# ---------------------------------------------------------------- packing


def test_pack_example_spans():
    ex = synth_dataset(1, seed=0)[0]
    ids, tags = pack_example(ex)
    det = [i for i, t in zip(ids, tags) if t == SpanTag.DETECTION]
    assert bytes(det).decode() == f"LABEL: {ex.label}"
    expl = [i for i, t in zip(ids, tags) if t == SpanTag.EXPLANATION]
    assert expl[0] == SEP and expl[-1] == EOS
    assert bytes(expl[1:-1]).decode() == ex.explanation
    assert ids[0] == BOS


def test_cutoff_trims_code_only():
    ex = synth_dataset(1, seed=0)[0]
    full, _ = pack_example(ex)
    short, tags = pack_example(ex, cutoff=len(full) - 5)
    assert len(short) == len(full) - 5
    assert tags.count(SpanTag.DETECTION) == len(f"LABEL: {ex.label}")
    with pytest.raises(ValueError):
        prompt_tokens(ex, cutoff=10, reserve=20)


def test_batch_masks():
    b = pack_batch(synth_dataset(3, seed=0))
    assert b.tokens.shape == b.tags.shape
    assert not (b.detection_mask & b.explanation_mask).any()
    assert np.array_equal(b.loss_mask, b.detection_mask | b.explanation_mask)
    assert np.all(b.tokens[b.tags == SpanTag.PADDING] == PAD)
    assert b.detection_mask.sum() == sum(len(f"LABEL: {e.label}") for e in synth_dataset(3, seed=0))


def test_text_batch():
    b = pack_text_batch(["ab", "abcd"], cutoff=4)
    assert b.tokens.tolist() == [[BOS, 97, 98, EOS], [BOS, 97, 98, 99]]
    assert b.token_mask.tolist() == [[True, True, True], [True, True, True]]
    assert pack_text_batch(["a"], 8).token_mask.tolist() == [[True, True]]


def test_encode_is_utf8():
    assert encode("é") == list("é".encode())
    assert json.loads(json.dumps(decode_text(tokenize("é")))) == "é"
