import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bagvae import corpus
from bagvae.corpus import (Bag, Dropped, SentenceExample, Vocabulary, build_bags, build_vocab, dedup_train,
                           encode_sentence, normalize_text, relative_positions, resize_or_drop,
                           split_validation, subsample_bag)


def example(text, head=(0, 1), tail=(1, 2), pair=("a", "b"), relation="r"):
    return SentenceExample(tuple(text.split()), head, tail, pair, relation)


class TestNormalize:
    def test_examples(self):
        assert normalize_text(["New", "York", "123"]) == ["new", "york", "###"]
        assert normalize_text(["B2B"]) == ["b#b"]
        assert normalize_text(["ohio"]) == ["ohio"]
        assert normalize_text([]) == []

    @given(st.lists(st.text(max_size=8), max_size=6))
    def test_idempotent_and_digit_free(self, tokens):
        out = normalize_text(tokens)
        assert normalize_text(out) == out
        assert not any(ch in "0123456789" for tok in out for ch in tok)


class TestSpans:
    def test_empty_span_rejected(self):
        with pytest.raises(ValueError):
            example("a b c", head=(1, 1))

    def test_span_past_end_rejected(self):
        with pytest.raises(ValueError):
            example("a b c", tail=(2, 4))


class TestDedup:
    def test_identical(self):
        ex = example("a b c")
        assert dedup_train([ex, ex]) == [ex]

    def test_different_pair_survives(self):
        assert len(dedup_train([example("a b c"), example("a b c", pair=("a", "c"))])) == 2

    def test_fixture_hand_count(self, fixtures_dir):
        raw = corpus.read_corpus(fixtures_dir / "dedup10.jsonl")
        assert len(raw) == 10
        kept = dedup_train(raw)
        assert len(kept) == 7
        # first occurrences survive, in order
        assert kept[0] is raw[0] and kept[2] is raw[3]


class TestResize:
    def make(self, n, head, tail):
        return SentenceExample(tuple(f"w{i}" for i in range(n)), head, tail, ("a", "b"), "r")

    def test_fits(self):
        ex = self.make(40, (2, 3), (10, 11))
        assert resize_or_drop(ex, 50) is ex

    def test_window_remap(self):
        out = resize_or_drop(self.make(100, (60, 61), (70, 72)), 50)
        assert out.tokens == tuple(f"w{i}" for i in range(55, 77))
        assert out.head_span == (5, 6)
        assert out.tail_span == (15, 17)

    def test_dropped(self):
        assert resize_or_drop(self.make(90, (0, 1), (80, 81)), 50) is Dropped

    def test_truncate_when_spans_fit(self):
        out = resize_or_drop(self.make(60, (5, 6), (20, 22)), 50)
        assert len(out.tokens) == 50 and out.head_span == (5, 6)

    def test_evaluation_untouched(self):
        ex = self.make(90, (0, 1), (80, 81))
        assert resize_or_drop(ex, 50, training=False) is ex

    @given(n=st.integers(2, 150), a=st.integers(0, 149), b=st.integers(0, 149), max_len=st.integers(5, 60))
    def test_spans_within_max_len(self, n, a, b, max_len):
        a, b = a % (n - 1), b % (n - 1)
        ex = self.make(n, (a, a + 1), (b, b + 2))
        out = resize_or_drop(ex, max_len)
        if out is Dropped:
            assert max(a + 1, b + 2) - min(a, b) > max_len
            return
        assert len(out.tokens) <= max_len
        for span, orig in ((out.head_span, ex.head_span), (out.tail_span, ex.tail_span)):
            assert 0 <= span[0] < span[1] <= len(out.tokens)
            assert out.tokens[span[0]:span[1]] == ex.tokens[orig[0]:orig[1]]

    def test_outlier_fixture(self, fixtures_dir):
        raw = corpus.read_corpus(fixtures_dir / "outliers.jsonl")
        outcomes = [resize_or_drop(ex, 50) for ex in raw]
        assert outcomes[0] is raw[0]
        assert (outcomes[1].head_span, outcomes[1].tail_span) == ((5, 6), (15, 17))
        assert outcomes[2] is Dropped
        assert len(outcomes[3].tokens) == 50
        assert outcomes[4] is Dropped


class TestVocab:
    def test_tie_break(self):
        vocab = build_vocab([example("a b"), example("a c")], top_k=2)
        assert vocab.words[4:] == ["a", "b"]
        np.testing.assert_array_equal(vocab.ids(["c"]), [corpus.UNK_ID])

    def test_reserved_first(self):
        vocab = build_vocab([example("z y")], top_k=10)
        assert vocab.words[:4] == list(corpus.RESERVED)

    def test_full_coverage(self):
        exs = [example("p q r"), example("r s t")]
        vocab = build_vocab(exs, top_k=100)
        for ex in exs:
            assert corpus.UNK_ID not in vocab.ids(ex.tokens)

    def test_repeated_sentence_counts_once(self):
        exs = [example("x y", pair=(str(i), "b")) for i in range(3)] + [example("y z")]
        vocab = build_vocab(exs, top_k=10)
        assert dict(zip(vocab.words, vocab.freqs))["x"] == 1
        assert vocab.words[4] == "y"

    def test_relations_na_first(self):
        vocab = build_vocab([example("a b")], 5, ["r2", "NA", "r1"])
        assert vocab.relations == ["NA", "r1", "r2"]

    def test_bad_top_k(self):
        with pytest.raises(ValueError):
            build_vocab([example("a b")], 0)

    def test_save_load(self, tmp_path):
        vocab = build_vocab([example("a b c"), example("c d")], 10, ["r"])
        vocab.save(tmp_path / "v.tsv", tmp_path / "r.txt")
        back = Vocabulary.load(tmp_path / "v.tsv", tmp_path / "r.txt")
        assert back.words == vocab.words and back.relations == vocab.relations


class TestPositions:
    def test_clip_and_shift(self):
        np.testing.assert_array_equal(relative_positions(6, 2, 3), [1, 2, 3, 4, 5, 6])
        pos = relative_positions(20, 0, 5)
        assert pos.min() >= 0 and pos.max() == 10


class TestBags:
    def test_union_labels(self):
        rel2id = {"NA": 0, "r1": 1, "r2": 2}
        bags = build_bags([example("a b", relation="r1"), example("a c", relation="r1"),
                           example("a d", relation="r2")], rel2id)
        assert len(bags) == 1
        np.testing.assert_array_equal(bags[0].labels, [0, 1, 1])

    def test_ordered_key(self):
        rel2id = {"NA": 0, "r": 1}
        bags = build_bags([example("x y", pair=("A", "B")), example("x y", pair=("B", "A"))], rel2id)
        assert [b.pair_key for b in bags] == [("A", "B"), ("B", "A")]

    def test_na_bag(self):
        bags = build_bags([example("x y", relation="NA")], {"NA": 0, "r": 1})
        np.testing.assert_array_equal(bags[0].labels, [1, 0])
        assert not bags[0].is_positive

    def test_subsample_cap(self):
        bag = Bag(("a", "b"), list(range(600)), np.array([0, 1]))
        rng = np.random.default_rng(0)
        small = subsample_bag(bag, 500, rng)
        assert len(small.sentences) == 500
        assert len(set(small.sentences)) == 500
        assert len(bag.sentences) == 600
        assert subsample_bag(small, 500, rng) is small

    def test_split(self):
        bags = [Bag((str(i), "x"), [i], np.array([1])) for i in range(100)]
        train, val = split_validation(bags, 0.10, seed=3)
        assert (len(train), len(val)) == (90, 10)
        assert [b.pair_key for b in split_validation(bags, 0.10, seed=3)[1]] == [b.pair_key for b in val]
        with pytest.raises(ValueError):
            split_validation(bags, 1.0)


class TestPretrained:
    def test_vectors(self, tmp_path):
        vocab = build_vocab([example("a b")], 10)
        path = tmp_path / "vec.txt"
        path.write_text("a 1 2 3\nzzz 0 0 0\n")
        matrix, found = corpus.load_pretrained_vectors(path, vocab, 3, np.random.default_rng(0))
        assert found == 1
        np.testing.assert_array_equal(matrix[vocab.word2id["a"]], [1, 2, 3])

    def test_empty_file(self, tmp_path):
        vocab = build_vocab([example("a b")], 10)
        (tmp_path / "v.txt").write_text("")
        _, found = corpus.load_pretrained_vectors(tmp_path / "v.txt", vocab, 3, np.random.default_rng(0))
        assert found == 0

    def test_dim_mismatch(self, tmp_path):
        vocab = build_vocab([example("a b")], 10)
        (tmp_path / "v.txt").write_text("a 1 2\n")
        with pytest.raises(ValueError):
            corpus.load_pretrained_vectors(tmp_path / "v.txt", vocab, 3, np.random.default_rng(0))


class TestPipeline:
    def test_fixture_report(self, fixtures_dir):
        read = lambda name: corpus.read_corpus(fixtures_dir / name)
        result = corpus.preprocess(read("dedup10.jsonl"), read("dedup10_test.jsonl"), read("dedup10_val.jsonl"))
        assert result.report["duplicates_removed"] == 3
        assert result.report["train_instances"] == 7
        assert result.report["test_bags"] == 2
        assert result.vocab.relations[0] == "NA"
        # "1998" and "2004" both normalize to "####"
        assert "####" in result.vocab.word2id

    def test_encoded_round_trip(self, tmp_path, fixtures_dir):
        read = lambda name: corpus.read_corpus(fixtures_dir / name)
        result = corpus.preprocess(read("dedup10.jsonl"), read("dedup10_test.jsonl"), read("dedup10_val.jsonl"))
        corpus.save_bags(tmp_path / "train.bags", result.train)
        back = corpus.load_bags(tmp_path / "train.bags")
        assert [b.pair_key for b in back] == [b.pair_key for b in result.train]
        for b1, b2 in zip(back, result.train):
            np.testing.assert_array_equal(b1.labels, b2.labels)
            for s1, s2 in zip(b1.sentences, b2.sentences):
                np.testing.assert_array_equal(s1.token_ids, s2.token_ids)
                np.testing.assert_array_equal(s1.pos_tail, s2.pos_tail)
                assert s1.head_span == s2.head_span

    def test_encode_positions(self):
        vocab = build_vocab([example("a b c d")], 10)
        enc = encode_sentence(example("a b c d", head=(1, 2), tail=(3, 4)), vocab, 2)
        np.testing.assert_array_equal(enc.pos_head, [1, 2, 3, 4])
        np.testing.assert_array_equal(enc.pos_tail, [0, 0, 1, 2])

    def test_malformed_line(self, tmp_path):
        (tmp_path / "bad.jsonl").write_text('{"text": "a b"}\n')
        with pytest.raises(ValueError, match="bad.jsonl:1"):
            corpus.read_corpus(tmp_path / "bad.jsonl")
