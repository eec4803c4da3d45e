import itertools

import numpy as np
import pytest

from bagvae import kb
from bagvae.config import TransEConfig
from bagvae.corpus import Bag
from bagvae.kb import KbEmbeddings, PriorTable


def lattice_kg():
    """30 entities on a 5x3x2 lattice; relation k moves one step along axis k."""
    names = {}
    for a, b, c in itertools.product(range(5), range(3), range(2)):
        names[(a, b, c)] = f"n{a}{b}{c}"
    triples = []
    for (a, b, c), name in names.items():
        for k, step in enumerate(((1, 0, 0), (0, 1, 0), (0, 0, 1))):
            other = (a + step[0], b + step[1], c + step[2])
            if other in names:
                triples.append((name, f"axis{k}", names[other]))
    return triples


def embeddings(dim=4, gamma=10.0, seed=0):
    rng = np.random.default_rng(seed)
    return KbEmbeddings(["A", "B", "C"], ["r"], rng.normal(size=(3, dim)), rng.normal(size=(1, dim)), gamma)


class TestPrune:
    def test_both_directions(self):
        triples = [("A", "r", "B"), ("B", "r", "A"), ("A", "r", "C"), ("B", "s", "A")]
        kept = kb.prune_eval_links(triples, [("A", "B")])
        assert kept == [("A", "r", "C")]

    def test_brute_force_no_link(self):
        rng = np.random.default_rng(0)
        ents = [f"e{i}" for i in range(12)]
        triples = [(ents[i], "r", ents[j]) for i, j in rng.integers(0, 12, size=(80, 2))]
        pairs = [(ents[i], ents[j]) for i, j in rng.integers(0, 12, size=(10, 2))]
        kept = kb.prune_eval_links(triples, pairs)
        blocked = set(pairs) | {(b, a) for a, b in pairs}
        assert kept
        assert all((h, t) not in blocked for h, _, t in kept)
        assert len(kept) == sum((h, t) not in blocked for h, _, t in triples)


class TestScore:
    def test_exact_translation(self):
        emb = embeddings()
        emb.entity_emb[1] = emb.entity_emb[0] + emb.relation_emb[0]
        assert kb.transe_score("A", "r", "B", emb) == pytest.approx(10.0)

    def test_distance_equal_gamma(self):
        emb = KbEmbeddings(["A", "B"], ["r"], np.array([[0.0, 0.0], [6.0, 8.0]]), np.zeros((1, 2)), 10.0)
        assert kb.transe_score("A", "r", "B", emb) == pytest.approx(0.0)

    def test_matches_norm(self):
        emb = embeddings()
        h, r, t = emb.entity_emb[0], emb.relation_emb[0], emb.entity_emb[2]
        expected = 10.0 - np.sqrt(np.sum((h + r - t) ** 2))
        assert kb.transe_score("A", "r", "C", emb) == pytest.approx(expected, abs=1e-12)

    def test_unknown_id(self):
        with pytest.raises(KeyError):
            kb.transe_score("A", "r", "Z", embeddings())

    def test_adversarial_weights(self):
        w = kb.adversarial_weights(np.array([[1.0, 2.0, 3.0]]), 10.0, 1.0)
        np.testing.assert_allclose(w.sum(), 1.0)
        assert w[0, 0] > w[0, 1] > w[0, 2]


class TestTrain:
    def test_zero_steps_is_init(self):
        triples = lattice_kg()
        cfg = TransEConfig(dim=4, max_steps=0)
        a = kb.transe_train(triples, cfg, seed=5)
        b = kb.transe_train(triples, cfg, seed=5)
        np.testing.assert_array_equal(a.entity_emb, b.entity_emb)
        bound = 6.0 / np.sqrt(4)
        assert np.abs(a.entity_emb).max() <= bound

    def test_empty(self):
        with pytest.raises(ValueError):
            kb.transe_train([], TransEConfig(dim=4))

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            kb.transe_train(lattice_kg(), TransEConfig(dim=4), latent_dim=8)

    def test_offset_kg_margin(self):
        triples = lattice_kg()
        cfg = TransEConfig(dim=8, max_steps=800, batch_size=32, neg_size=16)
        emb = kb.transe_train(triples, cfg, seed=0)
        pos, neg = kb.distance_margin(emb, triples, np.random.default_rng(1), negatives=20)
        assert pos + 1.0 <= neg

    def test_save_load(self, tmp_path):
        emb = embeddings()
        emb.save(tmp_path / "e.bvae")
        back = KbEmbeddings.load(tmp_path / "e.bvae")
        assert back.entities == emb.entities and back.gamma == emb.gamma
        np.testing.assert_allclose(back.entity_emb, emb.entity_emb, rtol=1e-6)


class TestPriors:
    def test_unknown_pair_zero(self):
        table = kb.build_prior_table(embeddings(), [("X", "Y"), ("A", "Z")])
        np.testing.assert_array_equal(table.mean(("X", "Y")), 0.0)
        assert table.coverage == 0.0

    def test_self_difference(self):
        table = kb.build_prior_table(embeddings(), [("A", "A")])
        np.testing.assert_array_equal(table.mean(("A", "A")), 0.0)

    def test_mean_is_head_minus_tail(self):
        emb = embeddings()
        table = kb.build_prior_table(emb, [("A", "B"), ("B", "Q")])
        np.testing.assert_allclose(table.mean(("A", "B")), emb.entity_emb[0] - emb.entity_emb[1])
        assert table.coverage == 0.5

    def test_save_load(self, tmp_path):
        emb = embeddings()
        table = kb.build_prior_table(emb, [("A", "B"), ("C", "A"), ("A", "Q")])
        table.save(tmp_path / "p.bin")
        back = PriorTable.load(tmp_path / "p.bin")
        assert back.dim == table.dim and set(back.means) == set(table.means)
        assert back.coverage == pytest.approx(table.coverage)
        for key in table.means:
            np.testing.assert_allclose(back.mean(key), table.mean(key), rtol=1e-6)

    def test_filter_prior_only(self):
        emb = KbEmbeddings([f"e{i}" for i in range(8)], ["r"], np.arange(16.0).reshape(8, 2), np.zeros((1, 2)))
        pairs = [(f"e{i}", f"e{i + 1}") for i in range(7)] + [("x", "e1"), ("e2", "y"), ("x", "y")]
        table = kb.build_prior_table(emb, pairs)
        bags = [Bag(p, ["s"], np.array([1, 0])) for p in pairs]
        kept = kb.filter_prior_only(bags, table)
        assert len(kept) == 7
        assert all(table.has_prior(b.pair_key) for b in kept)

    def test_triples_io(self, tmp_path):
        triples = [("a", "r", "b"), ("c", "s", "d")]
        kb.save_triples(tmp_path / "t.tsv", triples)
        assert kb.load_triples(tmp_path / "t.tsv") == triples
        (tmp_path / "bad.tsv").write_text("a\tb\n")
        with pytest.raises(ValueError):
            kb.load_triples(tmp_path / "bad.tsv")
