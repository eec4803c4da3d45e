"""Layer primitives built on :mod:`bagvae.nn.tensor`."""
from __future__ import annotations

import numpy as np

from .tensor import (Tensor, getitem, log_softmax, log_softmax_array, matmul, pick,
                     scatter_rows, sigmoid_array)


def uniform(rng: np.random.Generator, shape, bound: float, name: str | None = None) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def normal(rng: np.random.Generator, shape, std: float, name: str | None = None) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def zeros(shape, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    out = matmul(x, weight.T)
    return out + bias if bias is not None else out


def init_lstm(rng: np.random.Generator, input_dim: int, hidden: int, prefix: str) -> dict[str, Tensor]:
    bound = 1.0 / np.sqrt(hidden)
    return {
        f"{prefix}.w_ih": uniform(rng, (4 * hidden, input_dim), bound, f"{prefix}.w_ih"),
        f"{prefix}.w_hh": uniform(rng, (4 * hidden, hidden), bound, f"{prefix}.w_hh"),
        f"{prefix}.b": uniform(rng, (4 * hidden,), bound, f"{prefix}.b"),
    }


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor,
              mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """One LSTM step over a batch of rows.

    Gate layout along the 4H axis is (input, forget, candidate, output).  Rows
    where ``mask`` is 0 carry ``h`` and ``c`` through unchanged, which lets
    padded sequences share a step.  Returns ``(h_next, c_next)``.
    """
    hidden = w_hh.shape[1]
    if x.shape[-1] != w_ih.shape[1] or h.shape[-1] != hidden or c.shape[-1] != hidden:
        raise ValueError(
            f"lstm_cell dimension mismatch: x {x.shape}, h {h.shape}, c {c.shape}, "
            f"w_ih {w_ih.shape}, w_hh {w_hh.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    h2 = h.data.reshape(-1, hidden)
    c2 = c.data.reshape(-1, hidden)
    z = x2 @ w_ih.data.T + h2 @ w_hh.data.T + b.data
    i = sigmoid_array(z[..., :hidden])
    f = sigmoid_array(z[..., hidden:2 * hidden])
    g = np.tanh(z[..., 2 * hidden:3 * hidden])
    o = sigmoid_array(z[..., 3 * hidden:])
    c_new = f * c2 + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64).reshape(-1, 1)
        h_out = m * h_new + (1.0 - m) * h2
        c_out = m * c_new + (1.0 - m) * c2
    else:
        m = None
        h_out, c_out = h_new, c_new
    packed = np.concatenate([h_out, c_out], axis=-1).reshape(h.shape[:-1] + (2 * hidden,))

    def backward(grad):
        grad = grad.reshape(-1, 2 * hidden)
        gh, gc = grad[:, :hidden], grad[:, hidden:]
        if m is not None:
            carry_h, carry_c = (1.0 - m) * gh, (1.0 - m) * gc
            gh, gc = m * gh, m * gc
        else:
            carry_h = carry_c = 0.0
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c2 * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            gh * tc * o * (1.0 - o),
        ], axis=-1)
        dx = (dz @ w_ih.data).reshape(x.shape)
        dh = (dz @ w_hh.data + carry_h).reshape(h.shape)
        dcell = (dc * f + carry_c).reshape(c.shape)
        return dx, dh, dcell, dz.T @ x2, dz.T @ h2, dz.sum(axis=0)

    hc = Tensor._make(packed, (x, h, c, w_ih, w_hh, b), backward, "lstm_cell")
    return hc[..., :hidden], hc[..., hidden:]


def adaptive_cutoffs(vocab_size: int) -> tuple[int, int]:
    if vocab_size < 15:
        raise ValueError(f"adaptive softmax needs a vocabulary of at least 15 words, got {vocab_size}")
    return vocab_size // 15, 3 * vocab_size // 15


class FullSoftmax:
    """Plain softmax output layer: logits = W h + b over the whole vocabulary."""

    def __init__(self, params: dict[str, Tensor], prefix: str = "out"):
        self.weight = params[f"{prefix}.w"]
        self.bias = params[f"{prefix}.b"]
        self.vocab_size = self.weight.shape[0]

    @staticmethod
    def init(rng: np.random.Generator, hidden: int, vocab_size: int, prefix: str = "out") -> dict[str, Tensor]:
        bound = 1.0 / np.sqrt(hidden)
        return {f"{prefix}.w": uniform(rng, (vocab_size, hidden), bound, f"{prefix}.w"),
                f"{prefix}.b": zeros((vocab_size,), f"{prefix}.b")}

    def nll(self, hidden: Tensor, targets) -> Tensor:
        targets = np.asarray(targets, dtype=np.int64)
        if targets.size and targets.max() >= self.vocab_size:
            raise ValueError("target id out of vocabulary range")
        return -pick(log_softmax(linear(hidden, self.weight, self.bias)), targets)

    def log_prob(self, hidden: np.ndarray) -> np.ndarray:
        return log_softmax_array(hidden @ self.weight.data.T + self.bias.data)


class AdaptiveSoftmax:
    """Three-cluster adaptive softmax.

    The head scores the ``cutoffs[0]`` most frequent words plus one logit per
    tail cluster.  A tail word's probability is the cluster's head probability
    times its probability inside the cluster, where the cluster scores come
    from a low-rank projection of the hidden state.
    """

    def __init__(self, params: dict[str, Tensor], vocab_size: int, prefix: str = "out"):
        self.vocab_size = vocab_size
        self.cutoffs = adaptive_cutoffs(vocab_size)
        self.bounds = (0, *self.cutoffs, vocab_size)
        self.head_w = params[f"{prefix}.head.w"]
        self.head_b = params[f"{prefix}.head.b"]
        self.tails = [(params[f"{prefix}.tail{j}.proj"], params[f"{prefix}.tail{j}.w"],
                       params[f"{prefix}.tail{j}.b"]) for j in range(2)]

    @staticmethod
    def init(rng: np.random.Generator, hidden: int, vocab_size: int, prefix: str = "out") -> dict[str, Tensor]:
        c0, c1 = adaptive_cutoffs(vocab_size)
        bound = 1.0 / np.sqrt(hidden)
        params = {f"{prefix}.head.w": uniform(rng, (c0 + 2, hidden), bound, f"{prefix}.head.w"),
                  f"{prefix}.head.b": zeros((c0 + 2,), f"{prefix}.head.b")}
        sizes = (c1 - c0, vocab_size - c1)
        for j, size in enumerate(sizes):
            dim = max(1, hidden // 4 ** (j + 1))
            params[f"{prefix}.tail{j}.proj"] = uniform(rng, (dim, hidden), bound, f"{prefix}.tail{j}.proj")
            params[f"{prefix}.tail{j}.w"] = uniform(rng, (size, dim), 1.0 / np.sqrt(dim), f"{prefix}.tail{j}.w")
            params[f"{prefix}.tail{j}.b"] = zeros((size,), f"{prefix}.tail{j}.b")
        return params

    def nll(self, hidden: Tensor, targets) -> Tensor:
        targets = np.asarray(targets, dtype=np.int64)
        if targets.size and targets.max() >= self.vocab_size:
            raise ValueError("target id out of vocabulary range")
        c0 = self.cutoffs[0]
        n = targets.shape[0]
        head_lp = log_softmax(linear(hidden, self.head_w, self.head_b))
        head_target = targets.copy()
        for j in range(2):
            lo, hi = self.bounds[j + 1], self.bounds[j + 2]
            head_target[(targets >= lo) & (targets < hi)] = c0 + j
        loss = -pick(head_lp, head_target)
        for j, (proj, w, b) in enumerate(self.tails):
            lo, hi = self.bounds[j + 1], self.bounds[j + 2]
            rows = np.nonzero((targets >= lo) & (targets < hi))[0]
            if rows.size == 0:
                continue
            sub_hidden = getitem(hidden, rows)
            tail_lp = log_softmax(linear(linear(sub_hidden, proj), w, b))
            loss = loss - scatter_rows(pick(tail_lp, targets[rows] - lo), rows, n)
        return loss

    def log_prob(self, hidden: np.ndarray) -> np.ndarray:
        c0 = self.cutoffs[0]
        head_lp = log_softmax_array(hidden @ self.head_w.data.T + self.head_b.data)
        parts = [head_lp[..., :c0]]
        for j, (proj, w, b) in enumerate(self.tails):
            tail_lp = log_softmax_array((hidden @ proj.data.T) @ w.data.T + b.data)
            parts.append(head_lp[..., c0 + j:c0 + j + 1] + tail_lp)
        return np.concatenate(parts, axis=-1)


def output_layer_kind(vocab_size: int, mode: str) -> str:
    """Resolve ``auto`` to a concrete softmax: adaptive above 10,000 words."""
    if mode not in ("auto", "adaptive", "full"):
        raise ValueError(f"unknown softmax mode {mode!r}")
    if mode == "auto":
        return "adaptive" if vocab_size > 10_000 else "full"
    return mode


def init_output_layer(rng, hidden: int, vocab_size: int, kind: str, prefix: str = "out"):
    if kind == "adaptive":
        return AdaptiveSoftmax.init(rng, hidden, vocab_size, prefix)
    return FullSoftmax.init(rng, hidden, vocab_size, prefix)


def build_output_layer(params, vocab_size: int, kind: str, prefix: str = "out"):
    if kind == "adaptive":
        return AdaptiveSoftmax(params, vocab_size, prefix)
    return FullSoftmax(params, prefix)

