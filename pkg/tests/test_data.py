import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dropnet.data import (
    PAD,
    SCITAIL_LABELS,
    UNK,
    Example,
    Vocabulary,
    batchify,
    build_vocab,
    load_examples,
    load_pretrained,
    synthetic_nli,
    tokenize,
    write_jsonl,
)
from dropnet.errors import ConfigError, DataError


def write_records(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def rec(s1, s2, label):
    return {"sentence1": s1, "sentence2": s2, "gold_label": label}


def test_tokenize():
    assert tokenize("A man, sleeping.") == ["a", "man", ",", "sleeping", "."]
    assert tokenize("  Don't  ") == ["don", "'", "t"]


# -- load_examples -------------------------------------------------------------


def test_empty_file(tmp_path):
    corpus = load_examples(write_records(tmp_path / "e.jsonl", []))
    assert corpus.examples == [] and corpus.skipped == 0


def test_no_consensus_skipped(tmp_path):
    path = write_records(tmp_path / "d.jsonl", [rec("a b", "c", "-"), rec("a", "b", "neutral")])
    corpus = load_examples(path)
    assert corpus.skipped == 1 and len(corpus) == 1


def test_two_record_label_mapping(tmp_path):
    path = write_records(tmp_path / "two.jsonl", [rec("A dog runs.", "An animal moves.", "entailment"),
                                                  rec("A dog runs.", "The dog sleeps.", "contradiction")])
    corpus = load_examples(path)
    assert [ex.label for ex in corpus.examples] == [0, 1]
    assert corpus.examples[0].premise == ["a", "dog", "runs", "."]
    assert corpus.num_classes == 3


def test_fixture_counts(fixtures):
    corpus = load_examples(fixtures / "tiny_train.jsonl")
    assert len(corpus) == 11 and corpus.skipped == 1


def test_tsv_scitail(fixtures):
    corpus = load_examples(fixtures / "tiny.tsv")
    assert corpus.label_names == SCITAIL_LABELS
    assert [ex.label for ex in corpus.examples] == [0, 1]


def test_unparseable_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(rec("a", "b", "neutral")) + "\n{not json\n", encoding="utf-8")
    with pytest.raises(DataError, match=r"bad.jsonl:2:"):
        load_examples(path)


def test_tsv_wrong_columns(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("a\tb\tneutral\nonly two\tcols\n", encoding="utf-8")
    with pytest.raises(DataError) as info:
        load_examples(path)
    assert info.value.line == 2


def test_unknown_label_lists_seen(tmp_path):
    path = write_records(tmp_path / "u.jsonl", [rec("a", "b", "neutral"), rec("a", "b", "maybe")])
    with pytest.raises(DataError, match=r"'maybe'.*\['neutral'\]"):
        load_examples(path)


def test_write_jsonl_round_trip(tmp_path):
    corpus = synthetic_nli(20, seed=4)
    write_jsonl(tmp_path / "s.jsonl", corpus.examples, corpus.label_names)
    again = load_examples(tmp_path / "s.jsonl")
    assert again.examples == corpus.examples


# -- vocabulary ----------------------------------------------------------------


def examples_of(text):
    return [Example(text.split(), ["x"], 0)]


def test_vocab_min_count_one():
    vocab = build_vocab(examples_of("a b a"))
    assert vocab.tokens == ["<pad>", "<unk>", "a", "b", "x"]


def test_vocab_min_count_two():
    vocab = build_vocab([Example("a b a".split(), ["a"], 0)], min_count=2)
    assert vocab.tokens == ["<pad>", "<unk>", "a"]
    assert vocab.index("b") == UNK


def test_vocab_deterministic():
    corpus = synthetic_nli(50, seed=2).examples
    assert build_vocab(corpus).tokens == build_vocab(corpus).tokens


def test_frozen_vocab_never_mutates():
    vocab = build_vocab(examples_of("a"))
    before = list(vocab.tokens)
    assert vocab.encode(["zzz", "a"]) == [UNK, 2]
    with pytest.raises(ValueError):
        vocab.add("zzz")
    assert vocab.tokens == before


# -- pretrained vectors --------------------------------------------------------


def test_pretrained_no_coverage(tmp_path):
    vocab = build_vocab(examples_of("a b"))
    path = tmp_path / "e.txt"
    path.write_text("zz 1 2 3\n", encoding="utf-8")
    out = load_pretrained(path, vocab, dim=3)
    assert out.found == 0 and out.missing == len(vocab) - 2
    assert np.all(out.table[PAD] == 0) and np.all(out.table[2:] != 0)


def test_pretrained_single_token_verbatim(tmp_path):
    vocab = build_vocab(examples_of("a b"))
    path = tmp_path / "e.txt"
    path.write_text("b 0.25 -1.5 3e-2\n", encoding="utf-8")
    out = load_pretrained(path, vocab, dim=3)
    assert out.found == 1
    assert out.table[vocab.index("b")].tolist() == [0.25, -1.5, 0.03]


def test_pretrained_coverage_matches_set_intersection(tmp_path, rng):
    vocab = build_vocab(examples_of("the cat sat on a mat"))
    file_tokens = ["cat", "dog", "mat", "the", "zebra"]
    path = tmp_path / "e.txt"
    path.write_text("".join(f"{t} " + " ".join(f"{v:.6f}" for v in rng.normal(size=4)) + "\n" for t in file_tokens))
    out = load_pretrained(path, vocab, dim=4)
    expected = len(set(file_tokens) & (set(vocab.tokens) - {"<pad>", "<unk>"}))
    assert out.found == expected


def test_pretrained_malformed_line(tmp_path):
    path = tmp_path / "e.txt"
    path.write_text("a 1 2 3\nb 1 two 3\n", encoding="utf-8")
    with pytest.raises(DataError) as info:
        load_pretrained(path, build_vocab(examples_of("a b")), dim=3)
    assert info.value.line == 2


def test_pretrained_wrong_dimension(tmp_path):
    path = tmp_path / "e.txt"
    path.write_text("a 1 2\n", encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        load_pretrained(path, build_vocab(examples_of("a")), dim=3)
    assert info.value.key == "embedding_dim"


# -- batching ------------------------------------------------------------------


def test_batch_sizes():
    data = synthetic_nli(5, seed=0).examples
    vocab = build_vocab(data)
    assert [len(b) for b in batchify(data, vocab, 2, shuffle_seed=1)] == [2, 2, 1]


def test_batch_seed_determinism():
    data = synthetic_nli(20, seed=0).examples
    vocab = build_vocab(data)
    a = [b.order.tolist() for b in batchify(data, vocab, 3, shuffle_seed=9)]
    b = [b.order.tolist() for b in batchify(data, vocab, 3, shuffle_seed=9)]
    c = [b.order.tolist() for b in batchify(data, vocab, 3, shuffle_seed=10)]
    assert a == b and a != c


def test_batch_rejects_zero_size():
    with pytest.raises(ConfigError):
        batchify([], Vocabulary(), 0)


corpora = st.lists(
    st.tuples(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=7),
              st.lists(st.sampled_from("abcdxyz"), min_size=1, max_size=5),
              st.integers(0, 2)),
    min_size=1, max_size=12,
)


@settings(max_examples=60, deadline=None)
@given(corpora, st.integers(1, 5), st.integers(0, 2**16), st.integers(1, 2))
def test_batch_properties(raw, batch_size, seed, min_count):
    data = [Example(p, h, y) for p, h, y in raw]
    vocab = build_vocab(data[: max(1, len(data) // 2)], min_count=min_count)
    batches = batchify(data, vocab, batch_size, shuffle_seed=seed)
    seen = Counter()
    for batch in batches:
        rows = [data[i] for i in batch.order]
        # brute-force per-batch maximum lengths
        lp = 0
        for ex in rows:
            lp = max(lp, len(ex.premise))
        assert batch.premise.shape[1] == lp
        assert batch.hypothesis.shape[1] == max(len(ex.hypothesis) for ex in rows)
        for idx, mask in ((batch.premise, batch.premise_mask), (batch.hypothesis, batch.hypothesis_mask)):
            np.testing.assert_array_equal(mask == 0, idx == PAD)
            assert np.all(mask.sum(axis=1) >= 1)
        for r, ex in enumerate(rows):
            n = int(batch.premise_mask[r].sum())
            decoded = vocab.decode(batch.premise[r, :n])
            assert decoded == [t if t in vocab else "<unk>" for t in ex.premise]
            assert batch.labels[r] == ex.label
        seen.update(batch.order.tolist())
    assert seen == Counter(range(len(data)))


def test_synthetic_is_seeded():
    a, b = synthetic_nli(30, seed=5, label_noise=0.2, distractors=2), synthetic_nli(30, seed=5, label_noise=0.2,
                                                                                   distractors=2)
    assert a.examples == b.examples
    assert synthetic_nli(30, seed=6).examples != a.examples
    assert all(ex.premise[-1] == "." for ex in a.examples)
