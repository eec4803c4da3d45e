"""Bag-level evaluation: PR curve, PR-AUC, P@N, reconstructions and latent dumps.

Nothing here accepts a prior table: evaluation always runs on text alone,
with the latent code fixed to the posterior mean.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import EOS_ID, Bag
from .model import JointModel, make_batch


@dataclass(frozen=True)
class PredictionRecord:
    pair_key: tuple[str, str]
    relation: int
    score: float
    is_fact: bool


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    total_facts: int
    ranked: list[PredictionRecord]

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist()))


def _batches(bags: Sequence[Bag], size: int):
    for i in range(0, len(bags), size):
        yield bags[i:i + size]


def collect_predictions(model: JointModel, bags: Sequence[Bag], batch_size: int = 256) -> list[PredictionRecord]:
    """One record per (bag, non-NA relation) with p(r | B) and the gold flag."""
    records = []
    for chunk in _batches(bags, batch_size):
        probs = model.predict(make_batch(chunk))
        for bag, row in zip(chunk, probs):
            for r in range(1, row.shape[0]):
                records.append(PredictionRecord(tuple(bag.pair_key), r, float(row[r]), bool(bag.labels[r])))
    return records


def rank_records(records: Sequence[PredictionRecord]) -> list[PredictionRecord]:
    """Descending score; ties by (pair_key, relation) ascending."""
    return sorted(records, key=lambda rec: (-rec.score, rec.pair_key, rec.relation))


def pr_curve(records: Sequence[PredictionRecord]) -> PRCurve:
    ranked = rank_records(records)
    flags = np.array([rec.is_fact for rec in ranked], dtype=np.float64)
    total = int(flags.sum())
    if total == 0:
        raise ValueError("PR curve needs at least one fact")
    tp = np.cumsum(flags)
    precision = tp / np.arange(1, len(flags) + 1)
    recall = tp / total
    return PRCurve(recall, precision, total, ranked)


def auc(curve: PRCurve) -> float:
    """Trapezoidal area under (recall, precision), starting from (0, precision@1)."""
    recall = np.concatenate([[0.0], curve.recall])
    precision = np.concatenate([[curve.precision[0]], curve.precision])
    return float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) * 0.5))


def pr_auc(records: Sequence[PredictionRecord]) -> float:
    return auc(pr_curve(records))


def precision_at_n(records: Sequence[PredictionRecord], n: int) -> float:
    if n < 1:
        raise ValueError("N must be >= 1")
    if n > len(records):
        raise ValueError(f"N={n} exceeds the {len(records)} available records")
    top = rank_records(records)[:n]
    return sum(rec.is_fact for rec in top) / n


def summarize(records: Sequence[PredictionRecord], ns: Sequence[int] = (100, 200, 300)) -> dict:
    out = {"auc": pr_auc(records), "records": len(records)}
    for n in ns:
        out[f"p@{n}"] = precision_at_n(records, n) if n <= len(records) else None
    return out


# -- exports --------------------------------------------------------------------------------

def write_pr_csv(path, curve: PRCurve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "score", "is_fact", "precision", "recall"])
        for i, rec in enumerate(curve.ranked):
            writer.writerow([i + 1, repr(rec.score), int(rec.is_fact),
                             repr(float(curve.precision[i])), repr(float(curve.recall[i]))])


def write_pr_svg(path, curve: PRCurve, width: int = 480, height: int = 360, label: str = "") -> None:
    pad = 40
    xs = pad + curve.recall * (width - 2 * pad)
    ys = height - pad - curve.precision * (height - 2 * pad)
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    title = f"PR curve {label} (AUC {auc(curve):.4f})".replace("  ", " ")
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'<rect width="100%" height="100%" fill="white"/>\n'
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>\n'
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>\n'
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">recall</text>\n'
        f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})">precision</text>\n'
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="13">{title}</text>\n'
        f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{pts}"/>\n'
        f'</svg>\n')
    Path(path).write_text(svg)


def write_predictions(path, records: Sequence[PredictionRecord], relations: Sequence[str] | None = None) -> None:
    with open(path, "w") as fh:
        for rec in records:
            rel = relations[rec.relation] if relations else rec.relation
            fh.write(json.dumps({"h": rec.pair_key[0], "t": rec.pair_key[1], "relation": rel,
                                 "score": rec.score, "is_fact": rec.is_fact}) + "\n")


# -- reconstruction and latent export ------------------------------------------------------

def reconstruct(model: JointModel, sentence, mode: str = "mean", max_steps: int = 50,
                rng: np.random.Generator | None = None) -> list[int]:
    """Greedy reconstruction of one encoded sentence.

    The returned ids include the terminating EOS when one was produced.
    """
    if sentence.length < 1:
        raise ValueError("cannot reconstruct an empty sentence")
    bag = Bag(sentence.pair_key, [sentence], np.zeros(model.dims.num_relations))
    return model.greedy_decode(make_batch([bag]), mode=mode, max_steps=max_steps, rng=rng)[0]


def strip_eos(ids: Sequence[int]) -> list[int]:
    ids = list(ids)
    return ids[:ids.index(EOS_ID)] if EOS_ID in ids else ids


@dataclass
class LatentRow:
    pair_key: tuple[str, str]
    relations: tuple[str, ...]
    mu: np.ndarray


def dump_latents(model: JointModel, bags: Sequence[Bag], sample_per_bag: int, rng: np.random.Generator,
                 na_relation: str = "NA") -> list[LatentRow]:
    """Posterior means of up to ``sample_per_bag`` random sentences of each positive bag."""
    rows = []
    for bag in bags:
        if not bag.is_positive:
            continue
        k = min(sample_per_bag, len(bag.sentences))
        pick = np.sort(rng.choice(len(bag.sentences), size=k, replace=False))
        chosen = Bag(bag.pair_key, [bag.sentences[i] for i in pick], bag.labels, bag.relations)
        mu = model.posterior_mean(make_batch([chosen]))
        rels = tuple(r for r in bag.relations if r != na_relation)
        rows.extend(LatentRow(tuple(bag.pair_key), rels, m) for m in mu)
    return rows


def write_latents_csv(path, rows: Sequence[LatentRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if rows:
            writer.writerow(["pair_key", "relations"] + [f"mu{i}" for i in range(rows[0].mu.shape[0])])
        for row in rows:
            writer.writerow(["|".join(row.pair_key), ";".join(row.relations)]
                            + [repr(float(v)) for v in row.mu])


def mean_pairwise_distances(vectors: np.ndarray, labels: Sequence[str]) -> tuple[float, float]:
    """Mean Euclidean distance between same-label and different-label vectors."""
    labels = np.asarray(labels)
    diff = vectors[:, None, :] - vectors[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(labels), dtype=bool)
    return float(dist[same & off_diag].mean()), float(dist[~same].mean())
