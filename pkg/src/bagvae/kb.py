"""Knowledge-base priors: TransE entity embeddings and per-pair prior means.

The prior mean of a pair is ``e_head - e_tail``; pairs with an entity the
KB does not know fall back to the zero vector (a standard normal prior).
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import TransEConfig
from .nn import container
from .nn.optim import AdagradState, AdamState, adagrad_step, adam_step, zero_grads
from .nn.tensor import Tensor, backward, getitem, l2norm, log_sigmoid, softmax_array, tabs

log = logging.getLogger(__name__)

Triple = tuple[str, str, str]


def load_triples(path) -> list[Triple]:
    triples = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not all(parts):
            raise ValueError(f"{path}:{lineno}: expected head<TAB>relation<TAB>tail")
        triples.append((parts[0], parts[1], parts[2]))
    return triples


def save_triples(path, triples: Iterable[Triple]) -> None:
    Path(path).write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in triples))


def load_pairs(path) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected head<TAB>tail")
        pairs.append((parts[0], parts[1]))
    return pairs


def save_pairs(path, pairs: Iterable[tuple[str, str]]) -> None:
    Path(path).write_text("".join(f"{h}\t{t}\n" for h, t in pairs))


def prune_eval_links(triples: Iterable[Triple], eval_pairs: Iterable[tuple[str, str]]) -> list[Triple]:
    """Drop every triple linking an evaluation pair, in either direction."""
    blocked = set()
    for h, t in eval_pairs:
        blocked.add((h, t))
        blocked.add((t, h))
    return [tr for tr in triples if (tr[0], tr[2]) not in blocked]


@dataclass
class KbEmbeddings:
    entities: list[str]
    relations: list[str]
    entity_emb: np.ndarray
    relation_emb: np.ndarray
    gamma: float = 10.0
    entity_index: dict[str, int] = field(init=False, repr=False)
    relation_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.entity_index = {e: i for i, e in enumerate(self.entities)}
        self.relation_index = {r: i for i, r in enumerate(self.relations)}

    @property
    def dim(self) -> int:
        return self.entity_emb.shape[1]

    def entity(self, name: str) -> np.ndarray:
        return self.entity_emb[self.entity_index[name]]

    def relation(self, name: str) -> np.ndarray:
        return self.relation_emb[self.relation_index[name]]

    def save(self, path) -> None:
        container.save(path, {"entity_emb": self.entity_emb, "relation_emb": self.relation_emb},
                       {"entities": self.entities, "relations": self.relations, "gamma": self.gamma})

    @classmethod
    def load(cls, path) -> "KbEmbeddings":
        t, meta = container.load(path)
        return cls(meta["entities"], meta["relations"], t["entity_emb"], t["relation_emb"], meta["gamma"])


def transe_distance(h: np.ndarray, r: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.linalg.norm(h + r - t, axis=-1)


def transe_score(h: str, r: str, t: str, emb: KbEmbeddings) -> float:
    """gamma - ||e_h + r - e_t||_2; raises KeyError on unknown ids."""
    for name, index in ((h, emb.entity_index), (t, emb.entity_index), (r, emb.relation_index)):
        if name not in index:
            raise KeyError(f"unknown id {name!r}")
    return float(emb.gamma - transe_distance(emb.entity(h), emb.relation(r), emb.entity(t)))


def adversarial_weights(neg_dist: np.ndarray, gamma: float, temperature: float) -> np.ndarray:
    """Self-adversarial weights over the negatives of each positive (last axis)."""
    return softmax_array(temperature * (gamma - neg_dist), axis=-1)


class _NegativeSampler:
    """Corrupts head or tail (p = 0.5 each), resampling corruptions that are true triples."""

    def __init__(self, triples: np.ndarray, num_entities: int, rng: np.random.Generator, max_rounds: int = 10):
        self.num_entities = num_entities
        self.rng = rng
        self.max_rounds = max_rounds
        self.known = np.unique(self._keys(triples[:, 0], triples[:, 1], triples[:, 2]))

    def _keys(self, h, r, t):
        n = self.num_entities
        return (r.astype(np.int64) * n + h) * n + t

    def sample(self, batch: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        b = batch.shape[0]
        heads = np.repeat(batch[:, :1], k, axis=1)
        tails = np.repeat(batch[:, 2:], k, axis=1)
        rels = np.repeat(batch[:, 1:2], k, axis=1)
        corrupt_head = self.rng.random((b, k)) < 0.5
        draws = self.rng.integers(0, self.num_entities, size=(b, k))
        heads = np.where(corrupt_head, draws, heads)
        tails = np.where(corrupt_head, tails, draws)
        for _ in range(self.max_rounds):
            bad = np.isin(self._keys(heads, rels, tails), self.known)
            if not bad.any():
                break
            redraw = self.rng.integers(0, self.num_entities, size=int(bad.sum()))
            heads[bad & corrupt_head] = redraw[corrupt_head[bad]]
            tails[bad & ~corrupt_head] = redraw[~corrupt_head[bad]]
        return heads, tails


def transe_train(triples: Sequence[Triple], config: TransEConfig, latent_dim: int | None = None,
                 seed: int = 0, log_every: int = 0) -> KbEmbeddings:
    """Train TransE (L2) with self-adversarial negative sampling.

    Loss per positive: ``-log sigmoid(gamma - d_pos) - sum_i w_i log sigmoid(d_neg_i - gamma)``
    with ``w = softmax(temperature * (gamma - d_neg))`` held constant, averaged
    over the batch, plus ``reg_coef * sum |e|^reg_norm`` over the batch's
    entity rows.
    """
    if not triples:
        raise ValueError("cannot train TransE on an empty triple set")
    dim = config.dim if config.dim is not None else latent_dim
    if dim is None:
        raise ValueError("TransE dimension unknown: set transe.dim or pass latent_dim")
    if latent_dim is not None and dim != latent_dim:
        raise ValueError(f"TransE dim {dim} differs from latent dim {latent_dim}")
    rng = np.random.default_rng(seed)
    entities = sorted({tr[0] for tr in triples} | {tr[2] for tr in triples})
    relations = sorted({tr[1] for tr in triples})
    e_index = {e: i for i, e in enumerate(entities)}
    r_index = {r: i for i, r in enumerate(relations)}
    data = np.array([(e_index[h], r_index[r], e_index[t]) for h, r, t in triples], dtype=np.int64)

    bound = 6.0 / np.sqrt(dim)
    params = {"entity": Tensor(rng.uniform(-bound, bound, (len(entities), dim)), requires_grad=True),
              "relation": Tensor(rng.uniform(-bound, bound, (len(relations), dim)), requires_grad=True)}
    if config.optimizer == "adagrad":
        opt = AdagradState(learning_rate=config.learning_rate)
    elif config.optimizer == "adam":
        opt = AdamState(learning_rate=config.learning_rate)
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    sampler = _NegativeSampler(data, len(entities), rng)
    gamma, k = config.gamma, config.neg_size
    batch_size = min(config.batch_size, len(data))

    for step in range(config.max_steps):
        batch = data[rng.integers(0, len(data), size=batch_size)]
        neg_h, neg_t = sampler.sample(batch, k)
        ent, rel = params["entity"], params["relation"]
        h = getitem(ent, batch[:, 0])
        r = getitem(rel, batch[:, 1])
        t = getitem(ent, batch[:, 2])
        pos_d = l2norm(h + r - t)
        nh = getitem(ent, neg_h)
        nt = getitem(ent, neg_t)
        neg_d = l2norm(nh + r.reshape(batch_size, 1, dim) - nt)
        if config.adversarial:
            w = adversarial_weights(neg_d.data, gamma, config.adv_temperature)
        else:
            w = np.full((batch_size, k), 1.0 / k)
        pos_loss = -log_sigmoid(gamma - pos_d).mean()
        neg_loss = -(log_sigmoid(neg_d - gamma) * w).sum(axis=1).mean()
        loss = pos_loss + neg_loss
        if config.reg_coef:
            rows = np.unique(batch[:, [0, 2]])
            loss = loss + config.reg_coef * (tabs(getitem(ent, rows)) ** config.reg_norm).sum()
        backward(loss)
        if config.optimizer == "adagrad":
            adagrad_step(opt, params)
        else:
            adam_step(opt, params)
        zero_grads(params)
        if log_every and (step + 1) % log_every == 0:
            log.info("transe step %d loss %.4f", step + 1, loss.item())
    return KbEmbeddings(entities, relations, params["entity"].data.copy(), params["relation"].data.copy(), gamma)


def distance_margin(emb: KbEmbeddings, triples: Sequence[Triple], rng: np.random.Generator,
                    negatives: int = 10) -> tuple[float, float]:
    """Mean distance of true triples and of uniformly corrupted ones."""
    pos, neg = [], []
    n = len(emb.entities)
    for h, r, t in triples:
        hv, rv, tv = emb.entity(h), emb.relation(r), emb.entity(t)
        pos.append(float(transe_distance(hv, rv, tv)))
        for _ in range(negatives):
            other = emb.entity_emb[rng.integers(0, n)]
            neg.append(float(transe_distance(other, rv, tv) if rng.random() < 0.5
                             else transe_distance(hv, rv, other)))
    return float(np.mean(pos)), float(np.mean(neg))


@dataclass
class PriorTable:
    dim: int
    means: dict[tuple[str, str], np.ndarray]
    coverage: float = 0.0

    def mean(self, pair: tuple[str, str]) -> np.ndarray:
        vec = self.means.get(tuple(pair))
        return vec if vec is not None else np.zeros(self.dim)

    def has_prior(self, pair: tuple[str, str]) -> bool:
        return bool(np.any(self.mean(pair) != 0.0))

    def matrix(self, pairs: Sequence[tuple[str, str]]) -> np.ndarray:
        out = np.zeros((len(pairs), self.dim))
        for i, pair in enumerate(pairs):
            out[i] = self.mean(pair)
        return out

    def save(self, path) -> None:
        """Header line ``BVAEPRIOR d=<d> n=<n>`` then binary records.

        Each record: uint16 length + UTF-8 head id, uint16 length + UTF-8 tail
        id, then ``d`` little-endian float32 values.
        """
        with open(path, "wb") as fh:
            fh.write(f"BVAEPRIOR d={self.dim} n={len(self.means)} coverage={self.coverage!r}\n".encode())
            for (h, t), vec in self.means.items():
                for name in (h, t):
                    raw = name.encode("utf-8")
                    fh.write(struct.pack("<H", len(raw)))
                    fh.write(raw)
                fh.write(np.asarray(vec, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "PriorTable":
        raw = Path(path).read_bytes()
        newline = raw.index(b"\n")
        header = dict(item.split("=") for item in raw[:newline].decode().split()[1:])
        dim, count = int(header["d"]), int(header["n"])
        pos = newline + 1
        means = {}
        for _ in range(count):
            names = []
            for _ in range(2):
                (length,) = struct.unpack_from("<H", raw, pos)
                pos += 2
                names.append(raw[pos:pos + length].decode("utf-8"))
                pos += length
            means[(names[0], names[1])] = np.frombuffer(raw, dtype="<f4", count=dim, offset=pos).astype(np.float64)
            pos += 4 * dim
        return cls(dim, means, float(header.get("coverage", 0.0)))


def build_prior_table(emb: KbEmbeddings, corpus_pairs: Iterable[tuple[str, str]]) -> PriorTable:
    """Prior mean ``e_head - e_tail`` per pair; zero when either entity is unknown."""
    means = {}
    nonzero = 0
    pairs = list(dict.fromkeys(tuple(p) for p in corpus_pairs))
    for h, t in pairs:
        if h in emb.entity_index and t in emb.entity_index:
            vec = emb.entity(h) - emb.entity(t)
        else:
            vec = np.zeros(emb.dim)
        means[(h, t)] = vec
        nonzero += bool(np.any(vec != 0.0))
    coverage = nonzero / len(pairs) if pairs else 0.0
    return PriorTable(emb.dim, means, coverage)


def filter_prior_only(bags, table: PriorTable):
    """Keep only the bags whose pair has a non-zero prior mean."""
    return [b for b in bags if table.has_prior(b.pair_key)]
