"""Synthetic corpus and knowledge graph with a known answer key.

Entities live at points of a small latent space and every relation is a fixed
offset vector: a fact ``(h, r, t)`` holds exactly when ``x_t - x_h = o_r``.
Facts are generated as short chains so entities are shared between triples,
which gives TransE something to propagate.  Each fact pair becomes a bag of
sentences built from relation templates that embed a relation keyword
phrase; off-template sentences (neutral connectors) model distant-supervision
noise while keeping at least one on-template sentence per positive bag.
Negative (NA) bags pair unrelated entities with neutral sentences only.
"""
from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import SentenceExample, write_corpus
from .kb import save_pairs, save_triples

NA = "NA"


@dataclass
class SynthSpec:
    num_relations: int = 4
    entities_per_relation: int = 40   # corpus fact pairs per relation
    kb_only_per_relation: int = 20    # extra facts that appear only in the KG
    chain_length: int = 3             # facts per entity chain
    min_bag: int = 1
    max_bag: int = 5
    noise: float = 0.2
    negative_fraction: float = 0.5    # fraction of all bags that are NA
    latent_dim: int = 8
    filler_vocab: int = 120
    keywords_per_relation: int = 2
    templates_per_relation: int = 3
    two_token_entity_rate: float = 0.25
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def validate(self) -> None:
        if self.num_relations < 1:
            raise ValueError("num_relations must be >= 1")
        if self.entities_per_relation < 1:
            raise ValueError("entities_per_relation must be >= 1")
        if not 0.0 <= self.noise < 1.0:
            raise ValueError(f"noise rate must lie in [0, 1), got {self.noise}")
        if not 0.0 <= self.negative_fraction < 1.0:
            raise ValueError(f"negative_fraction must lie in [0, 1), got {self.negative_fraction}")
        if not 1 <= self.min_bag <= self.max_bag:
            raise ValueError("need 1 <= min_bag <= max_bag")
        if self.chain_length < 1:
            raise ValueError("chain_length must be >= 1")
        if len(self.split) != 3 or any(f <= 0 for f in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split must be three positive fractions summing to 1")
        if self.filler_vocab < 10:
            raise ValueError("filler_vocab must be >= 10")


@dataclass
class Fact:
    head: str
    relation: str
    tail: str
    split: str  # train | val | test | kb


@dataclass
class SynthDataset:
    spec: SynthSpec
    relations: list[str]
    keywords: dict[str, list[str]]
    train: list[SentenceExample]
    val: list[SentenceExample]
    test: list[SentenceExample]
    triples: list[tuple[str, str, str]]
    eval_pairs: list[tuple[str, str]]
    answer_key: list[Fact]
    positions: dict[str, np.ndarray]
    offsets: np.ndarray
    on_template: dict[str, list[bool]] = field(default_factory=dict)  # split -> flag per sentence

    def pairs(self, split: str) -> list[tuple[str, str]]:
        examples = getattr(self, split)
        return list(dict.fromkeys(ex.pair_key for ex in examples))

    def write(self, out_dir) -> dict[str, str]:
        """Write corpus JSONL, triples TSV, eval pairs and answer key; return the paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {name: str(out / f"{name}.jsonl") for name in ("train", "val", "test")}
        for name in ("train", "val", "test"):
            write_corpus(paths[name], getattr(self, name))
        paths["triples"] = str(out / "triples.tsv")
        save_triples(paths["triples"], self.triples)
        paths["eval_pairs"] = str(out / "eval_pairs.tsv")
        save_pairs(paths["eval_pairs"], self.eval_pairs)
        paths["answer_key"] = str(out / "answer_key.tsv")
        Path(paths["answer_key"]).write_text(
            "".join(f"{f.head}\t{f.relation}\t{f.tail}\t{f.split}\n" for f in self.answer_key))
        paths["keywords"] = str(out / "keywords.json")
        Path(paths["keywords"]).write_text(json.dumps(self.keywords, indent=2, sort_keys=True) + "\n")
        spec = asdict(self.spec)
        spec["split"] = list(spec["split"])
        paths["spec"] = str(out / "synth_spec.json")
        Path(paths["spec"]).write_text(json.dumps(spec, indent=2, sort_keys=True) + "\n")
        return paths


def _word(index: int, prefix: str) -> str:
    """Letters-only token, so digit normalization never merges two of them."""
    letters = string.ascii_lowercase
    chars = []
    index += 26  # at least two letters
    while index:
        index, rem = divmod(index, 26)
        chars.append(letters[rem])
    return prefix + "".join(reversed(chars))


class _Lexicon:
    def __init__(self, spec: SynthSpec, rng: np.random.Generator):
        self.fillers = [_word(i, "w") for i in range(spec.filler_vocab)]
        self.neutral = [_word(i, "n") for i in range(8)]
        self.keywords = {f"R{chr(ord('a') + r)}": [_word(r * spec.keywords_per_relation + j, "k")
                                                   for j in range(spec.keywords_per_relation)]
                         for r in range(spec.num_relations)}
        self.templates = {}
        for rel in self.keywords:
            self.templates[rel] = [(int(rng.integers(0, 3)), int(rng.integers(0, 3)))
                                   for _ in range(spec.templates_per_relation)]

    def fill(self, rng: np.random.Generator, count: int) -> list[str]:
        return [self.fillers[i] for i in rng.integers(0, len(self.fillers), size=count)]


def _sentence(rng, lex: _Lexicon, head: list[str], tail: list[str], middle: list[str]) -> tuple:
    before = lex.fill(rng, int(rng.integers(1, 4)))
    after = lex.fill(rng, int(rng.integers(1, 4)))
    tokens = before + head + middle + tail + after
    h0 = len(before)
    t0 = h0 + len(head) + len(middle)
    return tuple(tokens), (h0, h0 + len(head)), (t0, t0 + len(tail))


def _on_template(rng, lex: _Lexicon, rel: str, head, tail):
    pre, post = lex.templates[rel][int(rng.integers(0, len(lex.templates[rel])))]
    middle = lex.fill(rng, pre) + lex.keywords[rel] + lex.fill(rng, post)
    return _sentence(rng, lex, head, tail, middle)


def _neutral(rng, lex: _Lexicon, head, tail):
    middle = lex.fill(rng, int(rng.integers(0, 2))) + [lex.neutral[int(rng.integers(0, len(lex.neutral)))]] \
        + lex.fill(rng, int(rng.integers(0, 2)))
    return _sentence(rng, lex, head, tail, middle)


def generate(spec: SynthSpec | None = None) -> SynthDataset:
    spec = spec or SynthSpec()
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lex = _Lexicon(spec, rng)
    relations = list(lex.keywords)
    offsets = rng.normal(0.0, 1.0, size=(spec.num_relations, spec.latent_dim))
    offsets *= 2.0 / np.linalg.norm(offsets, axis=1, keepdims=True)

    positions: dict[str, np.ndarray] = {}
    surface: dict[str, list[str]] = {}

    def new_entity(pos: np.ndarray) -> str:
        name = _word(len(positions), "e")
        positions[name] = pos
        surface[name] = [name] if rng.random() >= spec.two_token_entity_rate else [name, _word(len(positions), "s")]
        return name

    def make_facts(per_relation: int) -> list[tuple[str, str, str]]:
        links = np.repeat(np.arange(spec.num_relations), per_relation)
        rng.shuffle(links)
        facts = []
        for start in range(0, len(links), spec.chain_length):
            node = new_entity(rng.normal(0.0, 1.0, size=spec.latent_dim))
            for r in links[start:start + spec.chain_length]:
                nxt = new_entity(positions[node] + offsets[r])
                facts.append((node, relations[r], nxt))
                node = nxt
        return facts

    corpus_facts = make_facts(spec.entities_per_relation)
    kb_only = make_facts(spec.kb_only_per_relation) if spec.kb_only_per_relation else []

    fact_pairs = {(h, t) for h, _, t in corpus_facts + kb_only}
    entities = sorted({h for h, _, _ in corpus_facts} | {t for _, _, t in corpus_facts})
    n_pos = len(corpus_facts)
    n_neg = int(round(n_pos * spec.negative_fraction / (1.0 - spec.negative_fraction)))
    negatives: list[tuple[str, str]] = []
    seen = set()
    while len(negatives) < n_neg:
        i, j = rng.integers(0, len(entities), size=2)
        pair = (entities[i], entities[j])
        if i == j or pair in seen or pair in fact_pairs or pair[::-1] in fact_pairs:
            continue
        seen.add(pair)
        negatives.append(pair)

    # bags: (pair, relation or NA)
    bags = [((h, t), r) for h, r, t in corpus_facts] + [(p, NA) for p in negatives]
    order = rng.permutation(len(bags))
    cut1 = int(round(spec.split[0] * len(bags)))
    cut2 = cut1 + int(round(spec.split[1] * len(bags)))
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[idx] = "train" if rank < cut1 else "val" if rank < cut2 else "test"

    examples = {"train": [], "val": [], "test": []}
    flags = {"train": [], "val": [], "test": []}
    answer = []
    for idx in range(len(bags)):
        (h, t), rel = bags[idx]
        split = split_of[idx]
        size = int(rng.integers(spec.min_bag, spec.max_bag + 1))
        if rel == NA:
            on = [False] * size
        else:
            on = list(rng.random(size) >= spec.noise)
            on[int(rng.integers(0, size))] = True
            answer.append(Fact(h, rel, t, split))
        for flag in on:
            tokens, hs, ts = (_on_template(rng, lex, rel, surface[h], surface[t]) if flag
                              else _neutral(rng, lex, surface[h], surface[t]))
            examples[split].append(SentenceExample(tokens, hs, ts, (h, t), rel))
            flags[split].append(bool(flag))
    answer.extend(Fact(h, r, t, "kb") for h, r, t in kb_only)

    triples = list(corpus_facts) + list(kb_only)
    eval_pairs = [bags[i][0] for i in range(len(bags)) if split_of[i] in ("val", "test")]
    return SynthDataset(spec, relations, {r: list(k) for r, k in lex.keywords.items()},
                        examples["train"], examples["val"], examples["test"], triples, eval_pairs,
                        answer, positions, offsets, flags)


def load_answer_key(path) -> list[Fact]:
    facts = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            h, r, t, split = line.split("\t")
            facts.append(Fact(h, r, t, split))
    return facts


# -- independent metric oracle ----------------------------------------------------------

def oracle_metrics(answer_key: Sequence, predictions: Sequence, ns: Sequence[int] = (100, 200, 300)) -> dict:
    """PR-AUC and P@N computed naively from an answer key.

    ``answer_key`` holds ``(head, tail, relation)`` facts (or :class:`Fact`);
    ``predictions`` holds ``(pair_key, relation, score)`` tuples.  The rank of
    each prediction is counted directly as the number of predictions that beat
    it (higher score, or equal score and smaller ``(pair_key, relation)``).
    """
    facts = set()
    for f in answer_key:
        if isinstance(f, Fact):
            facts.add(((f.head, f.tail), f.relation))
        else:
            facts.add(((f[0], f[1]), f[2]))
    preds = [(tuple(p[0]), p[1], float(p[2])) for p in predictions]
    n = len(preds)
    slots = [None] * n
    for i, (key_i, rel_i, score_i) in enumerate(preds):
        rank = 0
        for j, (key_j, rel_j, score_j) in enumerate(preds):
            if j == i:
                continue
            if score_j > score_i or (score_j == score_i and (key_j, rel_j) < (key_i, rel_i)):
                rank += 1
        slots[rank] = (key_i, rel_i) in facts
    total = sum(slots)
    if total == 0:
        raise ValueError("no facts among the predictions")
    area = 0.0
    hits = 0
    prev_recall, prev_precision = 0.0, None
    for i, hit in enumerate(slots, 1):
        hits += hit
        precision = hits / i
        recall = hits / total
        if prev_precision is None:
            prev_precision = precision
        area += (recall - prev_recall) * (precision + prev_precision) / 2.0
        prev_recall, prev_precision = recall, precision
    out = {"auc": area}
    for k in ns:
        out[f"p@{k}"] = sum(slots[:k]) / k if k <= n else None
    return out
