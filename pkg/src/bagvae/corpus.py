"""Corpus ingestion and preprocessing for bag-level relation extraction.

Input is JSON lines, one instance per line::

    {"text": "...", "h": {"id": "...", "pos": [s, e]}, "t": {...}, "relation": "..."}

``pos`` spans are ``[start, end)`` token indices over the whitespace-split text.
"""
from __future__ import annotations

import json
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .nn import container

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
RESERVED = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3
CONTEXT_WINDOW = 5

_DIGIT = re.compile(r"\d")


@dataclass(frozen=True)
class SentenceExample:
    tokens: tuple[str, ...]
    head_span: tuple[int, int]
    tail_span: tuple[int, int]
    pair_key: tuple[str, str]
    relation: str

    def __post_init__(self):
        n = len(self.tokens)
        for span in (self.head_span, self.tail_span):
            start, end = span
            if not 0 <= start < end <= n:
                raise ValueError(f"span {span} invalid for a {n}-token sentence")


class _Dropped:
    def __repr__(self) -> str:
        return "Dropped"


Dropped = _Dropped()


@dataclass
class EncodedSentence:
    token_ids: np.ndarray
    pos_head: np.ndarray
    pos_tail: np.ndarray
    head_span: tuple[int, int]
    tail_span: tuple[int, int]
    pair_key: tuple[str, str]
    relation: str

    @property
    def length(self) -> int:
        return int(self.token_ids.shape[0])


@dataclass
class Bag:
    pair_key: tuple[str, str]
    sentences: list
    labels: np.ndarray
    relations: tuple[str, ...] = ()

    @property
    def is_positive(self) -> bool:
        return bool(self.labels[1:].any())


@dataclass
class Vocabulary:
    words: list[str]
    freqs: list[int]
    relations: list[str]
    word2id: dict[str, int] = field(init=False)
    rel2id: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.word2id = {w: i for i, w in enumerate(self.words)}
        self.rel2id = {r: i for i, r in enumerate(self.relations)}

    def __len__(self) -> int:
        return len(self.words)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def ids(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.word2id.get(t, UNK_ID) for t in tokens], dtype=np.int64)

    def tokens(self, ids: Iterable[int]) -> list[str]:
        return [self.words[int(i)] for i in ids]

    def save(self, vocab_path, relations_path) -> None:
        Path(vocab_path).write_text("".join(f"{w}\t{f}\n" for w, f in zip(self.words, self.freqs)))
        Path(relations_path).write_text("".join(f"{r}\n" for r in self.relations))

    @classmethod
    def load(cls, vocab_path, relations_path) -> "Vocabulary":
        words, freqs = [], []
        for line in Path(vocab_path).read_text().splitlines():
            word, freq = line.rsplit("\t", 1)
            words.append(word)
            freqs.append(int(freq))
        relations = Path(relations_path).read_text().splitlines()
        return cls(words, freqs, relations)


# -- reading ------------------------------------------------------------------------

def parse_instance(obj: dict) -> SentenceExample:
    tokens = tuple(obj["token"]) if "token" in obj else tuple(obj["text"].split())
    h, t = obj["h"], obj["t"]
    return SentenceExample(tokens, tuple(h["pos"]), tuple(t["pos"]), (str(h["id"]), str(t["id"])),
                           str(obj["relation"]))


def read_corpus(path) -> list[SentenceExample]:
    examples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                examples.append(parse_instance(json.loads(line)))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed instance ({exc})") from exc
    return examples


def write_corpus(path, examples: Iterable[SentenceExample]) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps({"text": " ".join(ex.tokens),
                                 "h": {"id": ex.pair_key[0], "pos": list(ex.head_span)},
                                 "t": {"id": ex.pair_key[1], "pos": list(ex.tail_span)},
                                 "relation": ex.relation}) + "\n")


# -- preprocessing steps ------------------------------------------------------------

def normalize_text(tokens: Sequence[str]) -> list[str]:
    """Lowercase and replace every decimal digit with ``#``."""
    return [_DIGIT.sub("#", tok.lower()) for tok in tokens]


def normalize_example(ex: SentenceExample) -> SentenceExample:
    return replace(ex, tokens=tuple(normalize_text(ex.tokens)))


def dedup_train(examples: Iterable[SentenceExample]) -> list[SentenceExample]:
    """Keep the first occurrence of each (sentence, pair, relation)."""
    seen = set()
    kept = []
    for ex in examples:
        key = (tuple(normalize_text(ex.tokens)), ex.pair_key, ex.relation)
        if key in seen:
            continue
        seen.add(key)
        kept.append(ex)
    return kept


def resize_or_drop(ex: SentenceExample, max_len: int, training: bool = True):
    """Fit a training sentence into ``max_len`` tokens around its arguments.

    Returns the (possibly shortened) example, or ``Dropped`` when the span
    from the first to the second argument alone is longer than ``max_len``.
    Evaluation sentences come back untouched.
    """
    if not training:
        return ex
    n = len(ex.tokens)
    if max(ex.head_span[1], ex.tail_span[1]) <= max_len:
        return ex if n <= max_len else replace(ex, tokens=ex.tokens[:max_len])
    lo = min(ex.head_span[0], ex.tail_span[0])
    hi = max(ex.head_span[1], ex.tail_span[1])
    if hi - lo > max_len:
        return Dropped
    for _ in range(CONTEXT_WINDOW):
        if lo > 0 and hi - lo < max_len:
            lo -= 1
        if hi < n and hi - lo < max_len:
            hi += 1
    shift = lo
    return replace(ex, tokens=ex.tokens[lo:hi],
                   head_span=(ex.head_span[0] - shift, ex.head_span[1] - shift),
                   tail_span=(ex.tail_span[0] - shift, ex.tail_span[1] - shift))


def build_vocab(train_examples: Iterable[SentenceExample], top_k: int,
                relations: Sequence[str] = (), na_relation: str = "NA") -> Vocabulary:
    """Word vocabulary from unique training sentences, most frequent first.

    Ties are broken lexicographically.  ``relations`` lists every relation
    name seen in any split; NA is pinned to id 0.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    unique = {tuple(normalize_text(ex.tokens)) for ex in train_examples}
    counts = Counter(tok for sent in unique for tok in sent)
    for tok in RESERVED:
        counts.pop(tok, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
    words = list(RESERVED) + [w for w, _ in ranked]
    freqs = [0] * len(RESERVED) + [c for _, c in ranked]
    rels = [na_relation] + sorted(set(relations) - {na_relation})
    return Vocabulary(words, freqs, rels)


def relative_positions(length: int, anchor: int, max_len: int) -> np.ndarray:
    """Offsets from ``anchor`` clipped to [-max_len, max_len] and shifted to [0, 2*max_len]."""
    offsets = np.arange(length) - anchor
    return np.clip(offsets, -max_len, max_len) + max_len


def encode_sentence(ex: SentenceExample, vocab: Vocabulary, max_len: int) -> EncodedSentence:
    n = len(ex.tokens)
    return EncodedSentence(
        token_ids=vocab.ids(ex.tokens),
        pos_head=relative_positions(n, ex.head_span[0], max_len),
        pos_tail=relative_positions(n, ex.tail_span[0], max_len),
        head_span=tuple(ex.head_span), tail_span=tuple(ex.tail_span),
        pair_key=ex.pair_key, relation=ex.relation)


def build_bags(examples: Iterable, rel2id: dict[str, int]) -> list[Bag]:
    """Group sentences by ordered pair; labels are the union of their relations.

    Bags come out in order of first appearance.
    """
    grouped: dict[tuple[str, str], list] = defaultdict(list)
    for ex in examples:
        grouped[ex.pair_key].append(ex)
    bags = []
    for key, sents in grouped.items():
        labels = np.zeros(len(rel2id), dtype=np.int64)
        rels = sorted({s.relation for s in sents})
        for r in rels:
            labels[rel2id[r]] = 1
        bags.append(Bag(key, sents, labels, tuple(rels)))
    return bags


def subsample_bag(bag: Bag, cap: int, rng: np.random.Generator) -> Bag:
    """Uniformly keep ``cap`` sentences of an oversized bag, preserving order."""
    if len(bag.sentences) <= cap:
        return bag
    keep = np.sort(rng.choice(len(bag.sentences), size=cap, replace=False))
    return replace(bag, sentences=[bag.sentences[i] for i in keep])


def split_validation(bags: Sequence[Bag], fraction: float = 0.10, seed: int = 0) -> tuple[list[Bag], list[Bag]]:
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    n_val = int(round(fraction * len(bags)))
    val_idx = set(rng.permutation(len(bags))[:n_val].tolist())
    train = [b for i, b in enumerate(bags) if i not in val_idx]
    val = [b for i, b in enumerate(bags) if i in val_idx]
    return train, val


def load_pretrained_vectors(path, vocab: Vocabulary, dim: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Embedding matrix with rows copied from a GloVe-style text file.

    Words absent from the file get N(0, 0.1^2) rows.  Returns the matrix and
    the number of rows found in the file.
    """
    matrix = rng.normal(0.0, 0.1, size=(len(vocab), dim))
    found = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            word, values = parts[0], parts[1:]
            try:
                vec = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed vector line") from exc
            if vec.shape[0] != dim:
                raise ValueError(f"{path}:{lineno}: vector has {vec.shape[0]} dims, config expects {dim}")
            idx = vocab.word2id.get(word)
            if idx is not None:
                matrix[idx] = vec
                found += 1
    return matrix, found


# -- full pipeline ------------------------------------------------------------------------

@dataclass
class PreprocessResult:
    vocab: Vocabulary
    train: list[Bag]
    val: list[Bag]
    test: list[Bag]
    report: dict


def preprocess(train: Sequence[SentenceExample], test: Sequence[SentenceExample],
               val: Sequence[SentenceExample] | None = None, *, max_len: int = 50,
               top_k: int = 40_000, val_fraction: float = 0.10, na_relation: str = "NA",
               seed: int = 0) -> PreprocessResult:
    """Normalize, split, deduplicate, resize, build the vocabulary and encode bags."""
    train = [normalize_example(ex) for ex in train]
    test = [normalize_example(ex) for ex in test]
    report = {"train_raw_instances": len(train)}
    if val is None:
        raw_bags = build_bags(train, {r: i for i, r in enumerate(sorted({ex.relation for ex in train}))})
        train_bags, val_bags = split_validation(raw_bags, val_fraction, seed)
        train = [s for b in train_bags for s in b.sentences]
        val = [s for b in val_bags for s in b.sentences]
    else:
        val = [normalize_example(ex) for ex in val]
    deduped = dedup_train(train)
    report["duplicates_removed"] = len(train) - len(deduped)
    resized = []
    truncated = 0
    for ex in deduped:
        out = resize_or_drop(ex, max_len, training=True)
        if out is Dropped:
            continue
        truncated += out is not ex
        resized.append(out)
    report["outliers_dropped"] = len(deduped) - len(resized)
    report["resized"] = truncated
    relations = {ex.relation for ex in (*resized, *val, *test)}
    vocab = build_vocab(resized, top_k, sorted(relations), na_relation)
    encoded = {name: [encode_sentence(ex, vocab, max_len) for ex in exs]
               for name, exs in (("train", resized), ("val", val), ("test", test))}
    bags = {name: build_bags(sents, vocab.rel2id) for name, sents in encoded.items()}
    for name in ("train", "val", "test"):
        report[f"{name}_instances"] = len(encoded[name])
        report[f"{name}_bags"] = len(bags[name])
        report[f"{name}_facts"] = int(sum(b.labels[1:].sum() for b in bags[name]))
    report["vocab_size"] = len(vocab)
    report["num_relations"] = vocab.num_relations
    return PreprocessResult(vocab, bags["train"], bags["val"], bags["test"], report)


# -- encoded bag cache --------------------------------------------------------------------

def save_bags(path, bags: Sequence[Bag]) -> None:
    sents = [s for b in bags for s in b.sentences]
    lengths = np.array([s.length for s in sents], dtype=np.int64)
    tensors = {
        "token_ids": np.concatenate([s.token_ids for s in sents]) if sents else np.zeros(0, np.int64),
        "pos_head": np.concatenate([s.pos_head for s in sents]) if sents else np.zeros(0, np.int64),
        "pos_tail": np.concatenate([s.pos_tail for s in sents]) if sents else np.zeros(0, np.int64),
        "lengths": lengths,
        "spans": np.array([[*s.head_span, *s.tail_span] for s in sents], dtype=np.int64).reshape(-1, 4),
        "bag_sizes": np.array([len(b.sentences) for b in bags], dtype=np.int64),
        "labels": np.array([b.labels for b in bags], dtype=np.int64).reshape(len(bags), -1),
    }
    meta = {"pair_keys": [list(b.pair_key) for b in bags],
            "relations": [s.relation for s in sents],
            "bag_relations": [list(b.relations) for b in bags]}
    container.save(path, tensors, meta)


def load_bags(path) -> list[Bag]:
    t, meta = container.load(path)
    offsets = np.concatenate([[0], np.cumsum(t["lengths"])])
    sents = []
    for i, length in enumerate(t["lengths"]):
        a, b = offsets[i], offsets[i + 1]
        span = t["spans"][i]
        sents.append(EncodedSentence(t["token_ids"][a:b], t["pos_head"][a:b], t["pos_tail"][a:b],
                                     (int(span[0]), int(span[1])), (int(span[2]), int(span[3])),
                                     None, meta["relations"][i]))
    bags = []
    pos = 0
    for j, size in enumerate(t["bag_sizes"]):
        key = tuple(meta["pair_keys"][j])
        members = sents[pos:pos + size]
        for s in members:
            s.pair_key = key
        pos += size
        bags.append(Bag(key, members, t["labels"][j], tuple(meta["bag_relations"][j])))
    return bags
