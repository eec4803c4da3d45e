import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bagvae.nn import container
from bagvae.nn.layers import (AdaptiveSoftmax, FullSoftmax, adaptive_cutoffs, init_lstm, lstm_cell,
                              output_layer_kind)
from bagvae.nn.optim import AdamState, adam_step, clip_by_global_norm
from bagvae.nn.tensor import (Tape, Tensor, backward, concat, exp, getitem, l2norm, log, log_sigmoid,
                              no_grad, segment_softmax, segment_sum, sigmoid, softmax, softplus, stack,
                              tanh)
from oracles import numeric_grad, relative_error


def leaf(values):
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


class TestBackward:
    def test_square_sum(self):
        w = leaf([1.0, 2.0, 3.0])
        backward((w * w).sum())
        np.testing.assert_array_equal(w.grad, [2.0, 4.0, 6.0])

    def test_sigmoid_at_zero(self):
        x = leaf(0.0)
        backward(sigmoid(x) * 1.0)
        assert x.grad == pytest.approx(0.25)

    def test_reuse_accumulates(self):
        x = leaf([3.0])
        y = x * 2.0 + x * x + x
        backward(y.sum())
        np.testing.assert_allclose(x.grad, [2.0 + 6.0 + 1.0])

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ValueError):
            backward(leaf([1.0, 2.0]) * 2.0)

    def test_tape_consumed(self):
        x = leaf([1.0, 2.0])
        y = (x * x).sum()
        backward(y)
        with pytest.raises(RuntimeError, match="consumed"):
            backward(y)

    def test_topological_order(self):
        a = leaf([1.0])
        b = a * 2.0
        c = b + a
        d = (c * b).sum()
        order = Tape(d).nodes
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for parent in node._parents:
                if parent.requires_grad:
                    assert pos[id(parent)] < pos[id(node)]
        assert len(order) == len({id(n) for n in order})

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with no_grad():
            y = x * 3.0
        assert not y.requires_grad
        assert y._parents == ()

    def test_random_graph_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a, b, c = (leaf(rng.normal(size=(3, 4))) for _ in range(3))
        w, v = leaf(rng.normal(size=(4, 2))), leaf(rng.normal(size=(2,)))

        def build():
            h = tanh(a @ w) * sigmoid(b @ w) + v
            g = softplus(c @ w).sum(axis=0) + exp(h * 0.3).mean(axis=0)
            z = log(softmax(concat([h, h * h], axis=-1), axis=-1)).sum()
            return z + log_sigmoid(g).sum() + l2norm(a + b).sum() + (c ** 2).sum() * 0.1

        backward(build())
        for p in (a, b, c, w, v):
            num = numeric_grad(lambda: build().item(), p.data)
            assert relative_error(p.grad, num).max() < 1e-4

    def test_indexing_ops_match_finite_differences(self):
        rng = np.random.default_rng(1)
        x = leaf(rng.normal(size=(5, 3)))
        idx = np.array([0, 2, 2, 4, 1])
        seg = np.array([0, 0, 1, 1, 1])

        def build():
            rows = getitem(x, idx)
            att = segment_softmax(rows, seg, 2)
            pooled = segment_sum(att * rows, seg, 2)
            return (stack([pooled, pooled * 2.0], axis=0) ** 2).sum() + x[1:3].sum()

        backward(build())
        num = numeric_grad(lambda: build().item(), x.data)
        assert relative_error(x.grad, num).max() < 1e-4


class TestLstmCell:
    def zero_params(self, d, h):
        return (Tensor(np.zeros((4 * h, d))), Tensor(np.zeros((4 * h, h))), Tensor(np.zeros(4 * h)))

    def test_zero_params_zero_state(self):
        h_next, c_next = lstm_cell(Tensor(np.ones((2, 3))), Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))),
                                   *self.zero_params(3, 4))
        np.testing.assert_array_equal(h_next.data, 0.0)
        np.testing.assert_array_equal(c_next.data, 0.0)

    def test_zero_params_halve_cell(self):
        c = np.array([[1.0, -2.0, 0.5]])
        h_next, c_next = lstm_cell(Tensor(np.ones((1, 2))), Tensor(np.zeros((1, 3))), Tensor(c),
                                   *self.zero_params(2, 3))
        np.testing.assert_allclose(c_next.data, 0.5 * c)
        np.testing.assert_allclose(h_next.data, 0.5 * np.tanh(0.5 * c))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            lstm_cell(Tensor(np.ones((1, 5))), Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 3))),
                      *self.zero_params(2, 3))

    def test_mask_carries_state(self):
        rng = np.random.default_rng(2)
        p = init_lstm(rng, 3, 4, "l")
        h, c = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4)))
        h2, c2 = lstm_cell(Tensor(rng.normal(size=(2, 3))), h, c, p["l.w_ih"], p["l.w_hh"], p["l.b"],
                           np.array([1.0, 0.0]))
        np.testing.assert_array_equal(h2.data[1], h.data[1])
        np.testing.assert_array_equal(c2.data[1], c.data[1])
        assert not np.allclose(h2.data[0], h.data[0])

    @pytest.mark.parametrize("masked", [False, True])
    def test_gradients_match_finite_differences(self, masked):
        rng = np.random.default_rng(3)
        p = init_lstm(rng, 3, 4, "l")
        x = leaf(rng.normal(size=(3, 3)))
        h0, c0 = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(3, 4)))
        mask = np.array([1.0, 0.0, 1.0]) if masked else None
        proj = rng.normal(size=(4,))

        def build():
            h, c = lstm_cell(x, h0, c0, p["l.w_ih"], p["l.w_hh"], p["l.b"], mask)
            h, c = lstm_cell(x * 0.5, h, c, p["l.w_ih"], p["l.w_hh"], p["l.b"], mask)
            return (h * proj).sum() + (c * c).sum() * 0.3

        backward(build())
        for t in (x, h0, c0, *p.values()):
            num = numeric_grad(lambda: build().item(), t.data)
            assert relative_error(t.grad, num).max() < 1e-4

    def test_single_row_input(self):
        rng = np.random.default_rng(4)
        p = init_lstm(rng, 2, 3, "l")
        x = leaf(rng.normal(size=2))
        h, c = lstm_cell(x, Tensor(np.zeros(3)), Tensor(np.zeros(3)), p["l.w_ih"], p["l.w_hh"], p["l.b"])
        assert h.shape == (3,)
        backward(h.sum())
        assert x.grad.shape == (2,)


class TestAdaptiveSoftmax:
    def test_cutoffs(self):
        assert adaptive_cutoffs(40_000) == (2666, 8000)
        assert adaptive_cutoffs(50_000) == (3333, 10_000)

    def test_small_vocab_rejected(self):
        with pytest.raises(ValueError):
            adaptive_cutoffs(14)

    def test_auto_kind(self):
        assert output_layer_kind(10_000, "auto") == "full"
        assert output_layer_kind(10_001, "auto") == "adaptive"

    def test_uniform_full_softmax(self):
        params = FullSoftmax.init(np.random.default_rng(0), 6, 30)
        params["out.w"].data[:] = 0.0
        layer = FullSoftmax(params)
        nll = layer.nll(Tensor(np.ones((4, 6))), [0, 5, 9, 29])
        np.testing.assert_allclose(nll.data, np.log(30.0))

    def test_target_out_of_range(self):
        rng = np.random.default_rng(0)
        layer = AdaptiveSoftmax(AdaptiveSoftmax.init(rng, 8, 45), 45)
        with pytest.raises(ValueError):
            layer.nll(Tensor(np.zeros((1, 8))), [45])

    @settings(max_examples=25, deadline=None)
    @given(vocab=st.integers(15, 120), seed=st.integers(0, 10_000))
    def test_distribution_sums_to_one(self, vocab, seed):
        rng = np.random.default_rng(seed)
        layer = AdaptiveSoftmax(AdaptiveSoftmax.init(rng, 8, vocab), vocab)
        hidden = rng.normal(size=(5, 8))
        lp = layer.log_prob(hidden)
        np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-12)
        targets = rng.integers(0, vocab, size=5)
        nll = layer.nll(Tensor(hidden), targets).data
        np.testing.assert_allclose(nll, -lp[np.arange(5), targets], atol=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        params = AdaptiveSoftmax.init(rng, 8, 45)
        layer = AdaptiveSoftmax(params, 45)
        hidden = leaf(rng.normal(size=(6, 8)))
        targets = np.array([0, 2, 3, 10, 20, 44])

        def build():
            return layer.nll(hidden, targets).sum()

        backward(build())
        for t in (hidden, *params.values()):
            num = numeric_grad(lambda: build().item(), t.data)
            assert relative_error(t.grad, num).max() < 1e-4


class TestAdam:
    def test_first_step_is_lr(self):
        p = {"x": leaf([0.5])}
        p["x"].grad = np.array([1.0])
        adam_step(AdamState(learning_rate=0.001), p)
        np.testing.assert_allclose(p["x"].data, [0.5 - 0.001], rtol=1e-6)

    def test_clipping_halves(self):
        grads = [np.array([12.0, 0.0]), np.array([0.0, 16.0])]
        clipped, norm = clip_by_global_norm(grads, 10.0)
        assert norm == pytest.approx(20.0)
        np.testing.assert_allclose(clipped[0], [6.0, 0.0])
        np.testing.assert_allclose(clipped[1], [0.0, 8.0])

    def test_two_steps_decrease_quadratic(self):
        p = {"x": leaf([1.0])}
        state = AdamState(learning_rate=0.1)
        values = [1.0]
        for _ in range(2):
            p["x"].grad = 2.0 * p["x"].data
            adam_step(state, p)
            values.append(float(p["x"].data[0]))
        assert values[0] > values[1] > values[2]
        assert state.t == 2

    def test_decoupled_weight_decay(self):
        p = {"x": leaf([2.0])}
        adam_step(AdamState(learning_rate=0.1, weight_decay=0.5), p, {"x": np.zeros(1)})
        np.testing.assert_allclose(p["x"].data, [2.0 - 0.1 * 0.5 * 2.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step(AdamState(), {"x": leaf([1.0, 2.0])}, {"x": np.zeros(3)})


class TestContainer:
    def test_round_trip(self, tmp_path):
        tensors = {"a": np.arange(6, dtype=np.float64).reshape(2, 3) / 7, "ids": np.array([1, -2, 3])}
        container.save(tmp_path / "x.bvae", tensors, {"k": [1, 2]})
        back, meta = container.load(tmp_path / "x.bvae")
        np.testing.assert_allclose(back["a"], tensors["a"], rtol=1e-7)
        assert back["a"].dtype == np.float64
        np.testing.assert_array_equal(back["ids"], [1, -2, 3])
        assert meta == {"k": [1, 2]}

    def test_header(self, tmp_path):
        container.save(tmp_path / "x.bvae", {"a": np.zeros(2)})
        assert (tmp_path / "x.bvae").read_bytes().startswith(b"BVAE1\n")

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"nope")
        with pytest.raises(container.ContainerError):
            container.load(tmp_path / "bad")
