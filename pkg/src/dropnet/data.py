"""Corpus loading, vocabulary, pretrained vectors and batching."""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .layers import PAD, glorot_uniform

UNK = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

SNLI_LABELS = ("entailment", "contradiction", "neutral")
SCITAIL_LABELS = ("entails", "neutral")
NO_CONSENSUS = "-"

_PUNCT = re.compile(r"([^\w\s])")


def tokenize(text: str) -> list[str]:
    """Lowercase, split punctuation into separate tokens, split on whitespace."""
    return _PUNCT.sub(r" \1 ", text.lower()).split()


@dataclass
class Example:
    premise: list[str]
    hypothesis: list[str]
    label: int


@dataclass
class Corpus:
    examples: list[Example]
    label_names: tuple[str, ...]
    skipped: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    def __len__(self) -> int:
        return len(self.examples)


def _infer_labels(raw: Iterable[str]) -> tuple[str, ...]:
    return SCITAIL_LABELS if "entails" in set(raw) else SNLI_LABELS


def _detect_format(path: Path) -> str:
    return "tsv" if path.suffix.lower() in (".tsv", ".txt") else "jsonl"


def load_examples(path, fmt: str | None = None, label_names: Sequence[str] | None = None) -> Corpus:
    """Read a JSONL (``sentence1``/``sentence2``/``gold_label``) or 3-column TSV file.

    Records labelled ``-`` are skipped and counted.  When ``label_names`` is not
    given the SciTail inventory is used if any label is ``entails``, otherwise
    the SNLI one.
    """
    path = Path(path)
    fmt = fmt or _detect_format(path)
    if fmt not in ("jsonl", "tsv"):
        raise ConfigError(f"unknown corpus format {fmt!r}; expected jsonl or tsv", key="format")
    if not path.exists():
        raise DataError("file not found", path)

    raw: list[tuple[int, str, str, str]] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if fmt == "jsonl":
                try:
                    rec = json.loads(line)
                    s1, s2, label = rec["sentence1"], rec["sentence2"], rec["gold_label"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DataError(f"unparseable record ({exc.__class__.__name__}: {exc})", path, lineno) from None
            else:
                cols = line.split("\t")
                if len(cols) != 3:
                    raise DataError(f"expected 3 tab-separated columns, got {len(cols)}", path, lineno)
                s1, s2, label = cols
            if not all(isinstance(v, str) for v in (s1, s2, label)):
                raise DataError("sentence1, sentence2 and gold_label must be strings", path, lineno)
            raw.append((lineno, s1, s2, label.strip()))

    names = tuple(label_names) if label_names is not None else _infer_labels(r[3] for r in raw)
    index = {name: i for i, name in enumerate(names)}
    examples: list[Example] = []
    skipped = 0
    seen: list[str] = []
    for lineno, s1, s2, label in raw:
        if label == NO_CONSENSUS:
            skipped += 1
            continue
        if label not in index:
            raise DataError(f"unknown label {label!r}; labels seen so far: {seen}", path, lineno)
        if label not in seen:
            seen.append(label)
        premise, hypothesis = tokenize(s1), tokenize(s2)
        if not premise or not hypothesis:
            raise DataError("premise and hypothesis must each contain at least one token", path, lineno)
        examples.append(Example(premise, hypothesis, index[label]))
    return Corpus(examples, names, skipped)


def write_jsonl(path, examples: Iterable[Example], label_names: Sequence[str]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {"sentence1": " ".join(ex.premise), "sentence2": " ".join(ex.hypothesis), "gold_label": label_names[ex.label]}
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


@dataclass
class Vocabulary:
    tokens: list[str] = field(default_factory=lambda: [PAD_TOKEN, UNK_TOKEN])
    frozen: bool = False

    def __post_init__(self):
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def add(self, token: str) -> int:
        if token in self._index:
            return self._index[token]
        if self.frozen:
            raise ValueError("vocabulary is frozen")
        self._index[token] = len(self.tokens)
        self.tokens.append(token)
        return self._index[token]

    def index(self, token: str) -> int:
        return self._index.get(token, UNK)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._index.get(t, UNK) for t in tokens]

    def decode(self, indices: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in indices]


def build_vocab(examples: Sequence[Example], min_count: int = 1) -> Vocabulary:
    """Tokens seen at least ``min_count`` times, in first-appearance order."""
    counts: Counter[str] = Counter()
    order: list[str] = []
    for ex in examples:
        for tok in (*ex.premise, *ex.hypothesis):
            if tok not in counts:
                order.append(tok)
            counts[tok] += 1
    vocab = Vocabulary()
    for tok in order:
        if counts[tok] >= min_count and tok not in (PAD_TOKEN, UNK_TOKEN):
            vocab.add(tok)
    vocab.frozen = True
    return vocab


# ---------------------------------------------------------------------------
# Pretrained vectors
# ---------------------------------------------------------------------------


@dataclass
class PretrainedTable:
    table: np.ndarray
    found: int
    missing: int


def load_pretrained(path, vocab: Vocabulary, dim: int = 300, rng: np.random.Generator | None = None) -> PretrainedTable:
    """Fill an embedding table from a ``token v1 ... v_dim`` text file.

    Rows without a vector keep the seeded uniform initialisation; the PAD row
    is zero.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    table = glorot_uniform(rng, len(vocab), dim, (len(vocab), dim))
    filled = np.zeros(len(vocab), dtype=bool)
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if not parts or not parts[0]:
                continue
            if len(parts) < 2:
                raise DataError("malformed embedding line (token without values)", path, lineno)
            try:
                values = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise DataError("malformed embedding line (non-numeric value)", path, lineno) from None
            if values.size != dim:
                raise ConfigError(
                    f"{path}:{lineno}: embedding has {values.size} values but embedding_dim is {dim}",
                    key="embedding_dim",
                )
            token = parts[0]
            if token in vocab:
                i = vocab.index(token)
                if i != PAD:
                    table[i] = values
                    filled[i] = True
    table[PAD] = 0.0
    found = int(filled.sum())
    return PretrainedTable(table, found, len(vocab) - 2 - found)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    premise: np.ndarray  # [B, Lp] int
    hypothesis: np.ndarray  # [B, Lh] int
    premise_mask: np.ndarray  # [B, Lp] float, 1 = valid
    hypothesis_mask: np.ndarray
    labels: np.ndarray  # [B] int
    order: np.ndarray  # positions of these rows in the input list

    def __len__(self) -> int:
        return len(self.labels)


def _pad(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    length = max(len(s) for s in seqs)
    idx = np.full((len(seqs), length), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        idx[i, : len(s)] = s
    return idx, (idx != PAD).astype(np.float64)


def batchify(
    examples: Sequence[Example],
    vocab: Vocabulary,
    batch_size: int,
    shuffle_seed: int | None = None,
) -> list[Batch]:
    """Group into batches padded to each batch's own max lengths.

    With ``shuffle_seed`` the order is a seeded permutation; the last batch may
    be partial.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}", key="batch_size")
    order = np.arange(len(examples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(examples))
    batches = []
    for start in range(0, len(order), batch_size):
        rows = order[start : start + batch_size]
        prem, pmask = _pad([vocab.encode(examples[i].premise) for i in rows])
        hyp, hmask = _pad([vocab.encode(examples[i].hypothesis) for i in rows])
        labels = np.array([examples[i].label for i in rows], dtype=np.int64)
        batches.append(Batch(prem, hyp, pmask, hmask, labels, rows))
    return batches


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------

_NOUNS = (
    "man woman child dog cat boy girl player chef dancer farmer doctor student artist "
    "driver singer worker tourist runner swimmer"
).split()
_VERBS = "runs sleeps eats sings walks swims reads cooks jumps waves climbs paints".split()
_ADJS = "young old tall small happy tired busy quiet".split()
_PLACES = "park beach street kitchen field garden market station".split()


def synthetic_nli(n: int, seed: int, label_noise: float = 0.0, distractors: int = 0,
                  distractor_pool: int = 1000) -> Corpus:
    """Generate SNLI-style triples whose label follows from word overlap rules.

    Entailment drops modifiers from the premise, contradiction negates the verb
    or swaps the subject, neutral adds unsupported information.  ``label_noise``
    reassigns that fraction of labels uniformly at random.  ``distractors``
    appends that many rare filler words (drawn from ``distractor_pool``
    distinct ones) to each premise; they carry no label signal but make
    memorisation easy.
    """
    rng = np.random.default_rng(seed)
    # filler words come from their own stream so they never shift the content
    filler_rng = np.random.default_rng([seed, 1])
    pick = lambda seq: seq[int(rng.integers(len(seq)))]  # noqa: E731
    examples = []
    for _ in range(n):
        noun, verb, adj, place = pick(_NOUNS), pick(_VERBS), pick(_ADJS), pick(_PLACES)
        premise = f"a {adj} {noun} {verb} in the {place} ."
        label = int(rng.integers(3))
        if label == 0:
            hyp = pick([f"a {noun} {verb} .", f"a {adj} {noun} {verb} .", f"someone {verb} in the {place} ."])
        elif label == 1:
            other = pick([x for x in _NOUNS if x != noun])
            hyp = pick([f"a {noun} does not {verb.rstrip('s')} .", f"nobody {verb} in the {place} .", f"only a {other} {verb} here ."])
        else:
            other = pick([x for x in _NOUNS if x != noun])
            hyp = pick([f"a {noun} {verb} with a {other} .", f"the {noun} {verb} because it is late .", f"a {noun} {verb} for a prize ."])
        if label_noise and rng.random() < label_noise:
            label = int(rng.integers(3))
        tokens = tokenize(premise)
        if distractors:
            tokens[-1:-1] = [f"w{int(i)}" for i in filler_rng.integers(distractor_pool, size=distractors)]
        examples.append(Example(tokens, tokenize(hyp), label))
    return Corpus(examples, SNLI_LABELS)
