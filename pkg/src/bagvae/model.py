"""Joint bag classifier and sentence VAE.

A shared BiLSTM encodes every sentence of a bag.  Its final states feed a
Gaussian posterior; the sampled latent code both conditions an LSTM decoder
that reconstructs the sentence and joins the entity representations in the
sentence vector used by selective attention.  In ``baseline`` mode there is no
posterior or decoder and the final encoder state takes the latent code's place.

All batched functions operate on a :class:`Batch` holding every sentence of
one or more bags, padded to a common length and tagged with its bag index.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import BOS_ID, EOS_ID, PAD_ID, UNK_ID, Bag
from .nn import container
from .nn.layers import (build_output_layer, init_lstm, init_output_layer, linear, lstm_cell,
                        normal, output_layer_kind, uniform, zeros)
from .nn.tensor import (Tensor, concat, exp, getitem, no_grad, segment_softmax, segment_sum,
                        softplus, stack)


class CheckpointMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    num_relations: int
    max_len: int = 50
    word_dim: int = 50
    pos_dim: int = 8
    latent_dim: int = 64
    enc_hidden: int = 256
    dec_hidden: int = 256
    rel_dim: int = 64
    softmax: str = "full"
    mode: str = "vae"

    @classmethod
    def from_config(cls, model_cfg, data_cfg, vocab_size: int, num_relations: int) -> "ModelDims":
        return cls(vocab_size=vocab_size, num_relations=num_relations, max_len=data_cfg.max_len,
                   word_dim=model_cfg.word_dim, pos_dim=model_cfg.pos_dim, latent_dim=model_cfg.latent_dim,
                   enc_hidden=model_cfg.enc_hidden, dec_hidden=model_cfg.dec_hidden, rel_dim=model_cfg.rel_dim,
                   softmax=output_layer_kind(vocab_size, model_cfg.softmax), mode=model_cfg.mode)

    @property
    def input_dim(self) -> int:
        return self.word_dim + 2 * self.pos_dim

    @property
    def has_vae(self) -> bool:
        return self.mode == "vae"


@dataclass
class Batch:
    tokens: np.ndarray       # (N, T) padded token ids
    pos_head: np.ndarray     # (N, T)
    pos_tail: np.ndarray     # (N, T)
    lengths: np.ndarray      # (N,)
    head_spans: np.ndarray   # (N, 2)
    tail_spans: np.ndarray   # (N, 2)
    bag_ids: np.ndarray      # (N,) index of each sentence's bag
    labels: np.ndarray       # (B, R)
    pair_keys: list

    @property
    def num_sentences(self) -> int:
        return self.tokens.shape[0]

    @property
    def num_bags(self) -> int:
        return self.labels.shape[0]

    @property
    def bag_sizes(self) -> np.ndarray:
        return np.bincount(self.bag_ids, minlength=self.num_bags)


def make_batch(bags: Sequence[Bag]) -> Batch:
    sents = [s for b in bags for s in b.sentences]
    if not sents:
        raise ValueError("batch has no sentences")
    lengths = np.array([s.length for s in sents], dtype=np.int64)
    if lengths.min() < 1:
        raise ValueError("empty sentence")
    n, width = len(sents), int(lengths.max())
    tokens = np.full((n, width), PAD_ID, dtype=np.int64)
    pos_head = np.zeros((n, width), dtype=np.int64)
    pos_tail = np.zeros((n, width), dtype=np.int64)
    for i, s in enumerate(sents):
        tokens[i, :s.length] = s.token_ids
        pos_head[i, :s.length] = s.pos_head
        pos_tail[i, :s.length] = s.pos_tail
    bag_ids = np.repeat(np.arange(len(bags)), [len(b.sentences) for b in bags])
    return Batch(tokens, pos_head, pos_tail, lengths,
                 np.array([s.head_span for s in sents], dtype=np.int64),
                 np.array([s.tail_span for s in sents], dtype=np.int64),
                 bag_ids, np.array([b.labels for b in bags], dtype=np.float64),
                 [b.pair_key for b in bags])


@dataclass
class Noise:
    """Every random quantity of one training forward pass.

    ``eps`` of None means the latent code is the posterior mean.  ``word_mask``
    marks decoder inputs replaced by UNK; ``teacher`` marks sentences decoded
    with ground-truth inputs.
    """
    eps: np.ndarray | None = None
    input_mask: np.ndarray | None = None
    word_mask: np.ndarray | None = None
    teacher: np.ndarray | None = None

    def take(self, order: np.ndarray) -> "Noise":
        pick = lambda a: None if a is None else a[order]
        return Noise(pick(self.eps), pick(self.input_mask), pick(self.word_mask), pick(self.teacher))


def draw_noise(rng: np.random.Generator, batch: Batch, dims: ModelDims, input_dropout: float,
               word_dropout: float, teacher_force: float) -> Noise:
    """Draw, in this order: encoder input dropout mask, eps, word dropout mask, teacher-force coins."""
    n, width = batch.tokens.shape
    keep = 1.0 - input_dropout
    if input_dropout > 0:
        input_mask = (rng.random((n, width, dims.input_dim)) < keep) / keep
    else:
        input_mask = None
    if not dims.has_vae:
        return Noise(input_mask=input_mask)
    eps = rng.standard_normal((n, dims.latent_dim))
    word_mask = rng.random((n, width + 1)) < word_dropout
    teacher = rng.random(n) < teacher_force
    return Noise(eps, input_mask, word_mask, teacher)


# -- parameters -------------------------------------------------------------------------

def init_params(dims: ModelDims, rng: np.random.Generator, word_vectors: np.ndarray | None = None) -> dict[str, Tensor]:
    """Fresh parameters, drawn from ``rng`` in a fixed order."""
    p: dict[str, Tensor] = {}
    if word_vectors is not None:
        if word_vectors.shape != (dims.vocab_size, dims.word_dim):
            raise ValueError(f"word vectors have shape {word_vectors.shape}, "
                             f"expected {(dims.vocab_size, dims.word_dim)}")
        p["word_emb"] = Tensor(np.array(word_vectors, dtype=np.float64), requires_grad=True, name="word_emb")
    else:
        p["word_emb"] = normal(rng, (dims.vocab_size, dims.word_dim), 0.1, "word_emb")
    n_pos = 2 * dims.max_len + 1
    p["pos_head_emb"] = normal(rng, (n_pos, dims.pos_dim), 0.1, "pos_head_emb")
    p["pos_tail_emb"] = normal(rng, (n_pos, dims.pos_dim), 0.1, "pos_tail_emb")
    p["rel_emb"] = uniform(rng, (dims.num_relations, dims.rel_dim), 1.0 / np.sqrt(dims.rel_dim), "rel_emb")
    p.update(init_lstm(rng, dims.input_dim, dims.enc_hidden, "enc_fwd"))
    p.update(init_lstm(rng, dims.input_dim, dims.enc_hidden, "enc_bwd"))
    code_dim = dims.latent_dim if dims.has_vae else dims.enc_hidden
    sent_in = code_dim + 2 * dims.enc_hidden
    p["sent_w"] = uniform(rng, (dims.rel_dim, sent_in), 1.0 / np.sqrt(sent_in), "sent_w")
    p["cls_w"] = uniform(rng, (dims.num_relations, dims.rel_dim), 1.0 / np.sqrt(dims.rel_dim), "cls_w")
    p["cls_b"] = zeros((dims.num_relations,), "cls_b")
    if dims.has_vae:
        post_in = 2 * dims.enc_hidden
        bound = 1.0 / np.sqrt(post_in)
        p["mu_w"] = uniform(rng, (dims.latent_dim, post_in), bound, "mu_w")
        p["mu_b"] = zeros((dims.latent_dim,), "mu_b")
        p["logvar_w"] = uniform(rng, (dims.latent_dim, post_in), bound, "logvar_w")
        p["logvar_b"] = zeros((dims.latent_dim,), "logvar_b")
        p["dec_init_w"] = uniform(rng, (dims.dec_hidden, dims.latent_dim), 1.0 / np.sqrt(dims.latent_dim),
                                  "dec_init_w")
        p["dec_init_b"] = zeros((dims.dec_hidden,), "dec_init_b")
        p.update(init_lstm(rng, dims.word_dim + dims.latent_dim, dims.dec_hidden, "dec"))
        p.update(init_output_layer(rng, dims.dec_hidden, dims.vocab_size, dims.softmax, "out"))
    return p


# -- encoder ------------------------------------------------------------------------------

def embed_inputs(params, batch: Batch, input_mask: np.ndarray | None = None) -> Tensor:
    """x_t = [w_t; p_head_t; p_tail_t] for every token, shape (N, T, D)."""
    x = concat([getitem(params["word_emb"], batch.tokens),
                getitem(params["pos_head_emb"], batch.pos_head),
                getitem(params["pos_tail_emb"], batch.pos_tail)], axis=-1)
    return x * input_mask if input_mask is not None else x


def _run_lstm(x_steps: Tensor, lengths: np.ndarray, prefix: str, params, hidden: int):
    n, width = x_steps.shape[0], x_steps.shape[1]
    h = Tensor(np.zeros((n, hidden)))
    c = Tensor(np.zeros((n, hidden)))
    outs = []
    for t in range(width):
        mask = (t < lengths).astype(np.float64)
        h, c = lstm_cell(x_steps[:, t, :], h, c, params[f"{prefix}.w_ih"], params[f"{prefix}.w_hh"],
                         params[f"{prefix}.b"], mask)
        outs.append(h)
    return stack(outs, axis=0), h, c


def encode(params, batch: Batch, input_mask: np.ndarray | None = None):
    """BiLSTM over every sentence.

    Returns ``(outputs, h, c)``: outputs is (T, N, H) with forward and backward
    outputs summed per token; ``h`` and ``c`` are the summed final states of
    the two directions.
    """
    if batch.lengths.min() < 1:
        raise ValueError("empty sentence")
    hidden = params["enc_fwd.w_hh"].shape[1]
    x = embed_inputs(params, batch, input_mask)
    n, width = batch.tokens.shape
    out_f, h_f, c_f = _run_lstm(x, batch.lengths, "enc_fwd", params, hidden)
    # reversal index: step t of the backward pass reads token length-1-t
    steps = np.arange(width)[None, :]
    rev = np.where(steps < batch.lengths[:, None], batch.lengths[:, None] - 1 - steps, steps)
    rows = np.arange(n)[:, None]
    x_rev = getitem(x, (rows, rev))
    out_b_rev, h_b, c_b = _run_lstm(x_rev, batch.lengths, "enc_bwd", params, hidden)
    out_b = getitem(out_b_rev, (rev.T, np.arange(n)[None, :]))
    return out_f + out_b, h_f + h_b, c_f + c_b


def posterior(params, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """mu = W_mu [h; c] + b_mu and log-variance = W_sigma [h; c] + b_sigma."""
    hc = concat([h, c], axis=-1)
    if hc.shape[-1] != params["mu_w"].shape[1]:
        raise ValueError(f"posterior input has {hc.shape[-1]} dims, expected {params['mu_w'].shape[1]}")
    return linear(hc, params["mu_w"], params["mu_b"]), linear(hc, params["logvar_w"], params["logvar_b"])


def reparameterize(mu: Tensor, log_var: Tensor, eps: np.ndarray | None = None,
                   rng: np.random.Generator | None = None) -> Tensor:
    """z = mu + exp(0.5 * log_var) * eps; eps is drawn from ``rng`` when not given."""
    if eps is None:
        if rng is None:
            raise ValueError("pass eps or rng")
        eps = rng.standard_normal(mu.shape)
    return mu + exp(log_var * 0.5) * eps


def kl_gaussian(mu: Tensor, log_var: Tensor, prior_mean) -> Tensor:
    """KL(N(mu, diag(exp(log_var))) || N(prior_mean, I)), summed over the last axis."""
    prior_mean = np.asarray(prior_mean, dtype=np.float64)
    if prior_mean.shape[-1] != mu.shape[-1]:
        raise ValueError(f"prior mean has {prior_mean.shape[-1]} dims, code has {mu.shape[-1]}")
    diff = mu - prior_mean
    return (exp(log_var) + diff * diff - 1.0 - log_var).sum(axis=-1) * 0.5


# -- decoder ------------------------------------------------------------------------------

def _decoder_targets(batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Targets ``tokens + EOS`` and their lengths."""
    n, width = batch.tokens.shape
    targets = np.full((n, width + 1), PAD_ID, dtype=np.int64)
    targets[:, :width] = batch.tokens
    targets[np.arange(n), batch.lengths] = EOS_ID
    return targets, batch.lengths + 1


def decode_loss(params, out_layer, batch: Batch, z: Tensor, word_mask: np.ndarray | None = None,
                teacher: np.ndarray | None = None) -> Tensor:
    """Per-sentence reconstruction loss, averaged over target tokens, shape (N,).

    The decoder starts from h = W z + b, c = 0 and at step t reads
    ``[embedding(previous token); z]``.  Teacher-forced sentences feed the
    ground-truth previous token, the others their own previous argmax.
    ``word_mask`` replaces the fed token by UNK.
    """
    targets, dec_len = _decoder_targets(batch)
    n, steps = targets.shape
    if teacher is None:
        teacher = np.ones(n, dtype=bool)
    free = ~np.asarray(teacher, dtype=bool)
    hidden = params["dec.w_hh"].shape[1]
    h = linear(z, params["dec_init_w"], params["dec_init_b"])
    c = Tensor(np.zeros((n, hidden)))
    prev_pred = np.full(n, BOS_ID, dtype=np.int64)
    outs = []
    for t in range(steps):
        if t == 0:
            ids = np.full(n, BOS_ID, dtype=np.int64)
        else:
            ids = np.where(free, prev_pred, targets[:, t - 1])
        if word_mask is not None:
            ids = np.where(word_mask[:, t], UNK_ID, ids)
        x = concat([getitem(params["word_emb"], ids), z], axis=-1)
        h, c = lstm_cell(x, h, c, params["dec.w_ih"], params["dec.w_hh"], params["dec.b"],
                         (t < dec_len).astype(np.float64))
        outs.append(h)
        if free.any() and t + 1 < steps:
            prev_pred = out_layer.log_prob(h.data).argmax(axis=-1)
    states = stack(outs, axis=0)  # (steps, N, H)
    step_idx, sent_idx = np.nonzero(np.arange(steps)[:, None] < dec_len[None, :])
    nll = out_layer.nll(getitem(states, (step_idx, sent_idx)), targets[sent_idx, step_idx])
    return segment_sum(nll, sent_idx, n) * (1.0 / dec_len)


# -- classifier --------------------------------------------------------------------------

def entity_mean(outputs: Tensor, spans: np.ndarray) -> Tensor:
    """Average the encoder outputs over each sentence's [start, end) span."""
    if np.any(spans[:, 1] <= spans[:, 0]):
        raise ValueError("empty entity span")
    widths = spans[:, 1] - spans[:, 0]
    sent_idx = np.repeat(np.arange(spans.shape[0]), widths)
    tok_idx = np.concatenate([np.arange(a, b) for a, b in spans])
    n = spans.shape[0]
    pooled = segment_sum(getitem(outputs, (tok_idx, sent_idx)), sent_idx, n)
    return pooled * (1.0 / widths)[:, None]


def sentence_repr(params, outputs: Tensor, batch: Batch, code: Tensor) -> Tensor:
    """s = W_v [code; e1; e2] where e1, e2 are span-averaged encoder outputs."""
    e1 = entity_mean(outputs, batch.head_spans)
    e2 = entity_mean(outputs, batch.tail_spans)
    return linear(concat([code, e1, e2], axis=-1), params["sent_w"])


def selective_attention(s: Tensor, rel_emb: Tensor, bag_ids: np.ndarray, num_bags: int) -> tuple[Tensor, Tensor]:
    """Per-relation attention over each bag's sentences.

    Returns ``(bag_repr, weights)``: bag_repr is (B, R, d) with
    ``bag_repr[b, r] = sum_i a_r(s_i) s_i`` and weights is (N, R).
    """
    scores = s @ rel_emb.T
    weights = segment_softmax(scores, bag_ids, num_bags)
    n, d = s.shape
    r = rel_emb.shape[0]
    weighted = weights.reshape(n, r, 1) * s.reshape(n, 1, d)
    return segment_sum(weighted, bag_ids, num_bags), weights


def classify(params, bag_repr: Tensor) -> Tensor:
    """Relation logits: coordinate r of W_c B_r + b_c, shape (B, R)."""
    return (bag_repr * params["cls_w"]).sum(axis=-1) + params["cls_b"]


def bce_per_bag(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Binary cross entropy summed over relations, shape (B,)."""
    return (softplus(logits) - logits * labels).sum(axis=-1)


# -- the model ----------------------------------------------------------------------------

@dataclass
class ForwardResult:
    loss: Tensor
    components: dict
    probs: np.ndarray
    attention: np.ndarray
    per_bag_loss: np.ndarray


class JointModel:
    def __init__(self, dims: ModelDims, params: dict[str, Tensor]):
        self.dims = dims
        self.params = params
        self.out_layer = build_output_layer(params, dims.vocab_size, dims.softmax, "out") if dims.has_vae else None

    @classmethod
    def create(cls, dims: ModelDims, rng: np.random.Generator, word_vectors=None) -> "JointModel":
        return cls(dims, init_params(dims, rng, word_vectors))

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_params(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            if self.params[k].shape != v.shape:
                raise CheckpointMismatch(f"parameter {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def latent(self, batch: Batch, noise: Noise | None = None):
        """Encoder outputs plus (mu, log_var, code) for every sentence."""
        noise = noise or Noise()
        outputs, h, c = encode(self.params, batch, noise.input_mask)
        if not self.dims.has_vae:
            return outputs, None, None, h
        mu, log_var = posterior(self.params, h, c)
        z = mu if noise.eps is None else reparameterize(mu, log_var, noise.eps)
        return outputs, mu, log_var, z

    def forward(self, batch: Batch, noise: Noise | None = None, priors: np.ndarray | None = None,
                beta: float = 1.0, lam: float = 0.9) -> ForwardResult:
        """Joint loss ``lam * BCE + (1 - lam) * ELBO loss``, averaged over the batch's bags.

        ``priors`` is (B, d_z), one prior mean per bag (zeros when None).  In
        baseline mode the loss is the BCE alone.
        """
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {lam}")
        noise = noise or Noise()
        outputs, mu, log_var, code = self.latent(batch, noise)
        s = sentence_repr(self.params, outputs, batch, code)
        bag_repr, attention = selective_attention(s, self.params["rel_emb"], batch.bag_ids, batch.num_bags)
        logits = classify(self.params, bag_repr)
        bce = bce_per_bag(logits, batch.labels)
        comps = {"bce": float(bce.data.mean())}
        if self.dims.has_vae:
            if priors is None:
                priors = np.zeros((batch.num_bags, self.dims.latent_dim))
            rec = decode_loss(self.params, self.out_layer, batch, code, noise.word_mask, noise.teacher)
            kl = kl_gaussian(mu, log_var, priors[batch.bag_ids])
            inv_size = 1.0 / batch.bag_sizes
            rec_bag = segment_sum(rec, batch.bag_ids, batch.num_bags) * inv_size
            kl_bag = segment_sum(kl, batch.bag_ids, batch.num_bags) * inv_size
            elbo_bag = rec_bag + kl_bag * beta
            per_bag = bce * lam + elbo_bag * (1.0 - lam)
            comps.update(rec=float(rec_bag.data.mean()), kl=float(kl_bag.data.mean()), beta=float(beta))
        else:
            per_bag = bce
        loss = per_bag.mean()
        comps["loss"] = loss.item()
        return ForwardResult(loss, comps, _sigmoid_np(logits.data), attention.data, per_bag.data)

    def predict(self, batch: Batch) -> np.ndarray:
        """p(r | B) for every bag and relation, with z = mu and no dropout."""
        with no_grad():
            outputs, mu, log_var, code = self.latent(batch)
            s = sentence_repr(self.params, outputs, batch, code)
            bag_repr, _ = selective_attention(s, self.params["rel_emb"], batch.bag_ids, batch.num_bags)
            return _sigmoid_np(classify(self.params, bag_repr).data)

    def posterior_mean(self, batch: Batch) -> np.ndarray:
        if not self.dims.has_vae:
            raise ValueError("baseline model has no latent code")
        with no_grad():
            _, mu, _, _ = self.latent(batch)
            return mu.data

    def greedy_decode(self, batch: Batch, mode: str = "mean", max_steps: int = 50,
                      rng: np.random.Generator | None = None) -> list[list[int]]:
        """Greedy argmax decoding from BOS; each output ends at EOS or ``max_steps``."""
        if not self.dims.has_vae:
            raise ValueError("baseline model has no decoder")
        if mode not in ("mean", "sample"):
            raise ValueError(f"mode must be 'mean' or 'sample', got {mode!r}")
        p = self.params
        with no_grad():
            _, mu, log_var, _ = self.latent(batch)
            z = mu.data
            if mode == "sample":
                if rng is None:
                    raise ValueError("sample mode needs an rng")
                z = z + np.exp(0.5 * log_var.data) * rng.standard_normal(z.shape)
            n = z.shape[0]
            h = Tensor(z @ p["dec_init_w"].data.T + p["dec_init_b"].data)
            c = Tensor(np.zeros_like(h.data))
            ids = np.full(n, BOS_ID, dtype=np.int64)
            done = np.zeros(n, dtype=bool)
            out: list[list[int]] = [[] for _ in range(n)]
            for _ in range(max_steps):
                x = Tensor(np.concatenate([p["word_emb"].data[ids], z], axis=-1))
                h, c = lstm_cell(x, h, c, p["dec.w_ih"], p["dec.w_hh"], p["dec.b"])
                ids = self.out_layer.log_prob(h.data).argmax(axis=-1)
                for i in np.nonzero(~done)[0]:
                    out[i].append(int(ids[i]))
                done |= ids == EOS_ID
                if done.all():
                    break
        return out


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# -- checkpoints --------------------------------------------------------------------------

def save_checkpoint(path, model: JointModel, fingerprint: str, optimizer=None, meta: dict | None = None) -> None:
    tensors = {f"param/{k}": v.data for k, v in model.params.items()}
    info = {"fingerprint": fingerprint, "dims": model.dims.__dict__, **(meta or {})}
    if optimizer is not None:
        info["optimizer_t"] = optimizer.t
        for k, m in optimizer.m.items():
            tensors[f"adam_m/{k}"] = m
            tensors[f"adam_v/{k}"] = optimizer.v[k]
    container.save(path, tensors, info)


def load_checkpoint(path, fingerprint: str | None = None, force: bool = False):
    """Load ``(model, meta, optimizer_moments)`` from a checkpoint file."""
    tensors, meta = container.load(path)
    if fingerprint is not None and meta.get("fingerprint") != fingerprint and not force:
        raise CheckpointMismatch(
            f"checkpoint fingerprint {meta.get('fingerprint')} does not match config {fingerprint}")
    dims = ModelDims(**meta["dims"])
    params = {k.split("/", 1)[1]: Tensor(v, requires_grad=True, name=k.split("/", 1)[1])
              for k, v in tensors.items() if k.startswith("param/")}
    model = JointModel(dims, params)
    moments = {k: v for k, v in tensors.items() if not k.startswith("param/")}
    return model, meta, moments
