"""Training loop: KL annealing, bag subsampling, early stopping and checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import TrainConfig
from .corpus import Bag, subsample_bag
from .evaluate import collect_predictions, pr_auc
from .kb import PriorTable
from .model import JointModel, draw_noise, make_batch, save_checkpoint
from .nn.optim import AdamState, adam_step, zero_grads
from .nn.tensor import backward

log = logging.getLogger(__name__)


def beta_at(step: int, k: float, x0: float, prior_mode: str) -> float:
    """KL weight: logistic in ``step`` under a Normal prior, constant 1 under KB priors."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if prior_mode == "kb":
        return 1.0
    if prior_mode != "normal":
        raise ValueError(f"unknown prior mode {prior_mode!r}")
    if k <= 0:
        raise ValueError("annealing steepness k must be > 0")
    arg = -k * (step - x0)
    if arg > 700:
        return 0.0
    return 1.0 / (1.0 + math.exp(arg))


def anneal_schedule(cfg: TrainConfig, steps_per_epoch: int) -> tuple[float, float]:
    """``(k, x0)``; defaults centre the logistic at one epoch's worth of steps and
    make it rise from 0.1 to 0.9 over one epoch."""
    steps_per_epoch = max(steps_per_epoch, 1)
    x0 = cfg.anneal_x0 if cfg.anneal_x0 is not None else float(steps_per_epoch)
    k = cfg.anneal_k if cfg.anneal_k is not None else 2.0 * math.log(9.0) / steps_per_epoch
    return k, x0


class EarlyStopper:
    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.since_improvement = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record an epoch's score; return True when it is a new best."""
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.since_improvement = 0
            return True
        self.since_improvement += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.since_improvement >= self.patience


@dataclass
class TrainState:
    global_step: int = 0
    epoch: int = 0
    best_auc: float = -math.inf
    best_epoch: int = 0
    since_improvement: int = 0
    rng_state: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    state: TrainState
    history: list[dict]
    best_params: dict[str, np.ndarray]
    init_prior_distance: float | None = None


def make_batches(bags: Sequence[Bag], batch_size: int, rng: np.random.Generator,
                 window: int = 8) -> list[list[Bag]]:
    """Cut an already shuffled bag list into batches of similar token counts.

    Bags are sorted by total tokens inside windows of ``window`` batches, and
    the resulting batches are shuffled, so the order stays seed-determined.
    """
    batches = []
    span = batch_size * window
    for start in range(0, len(bags), span):
        chunk = sorted(bags[start:start + span], key=lambda b: sum(s.length for s in b.sentences))
        batches.extend(chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def prior_distance(model: JointModel, bags: Sequence[Bag], table: PriorTable, batch_size: int = 256) -> float:
    """Mean ||mu - prior mean|| over the sentences of bags whose pair has a KB prior."""
    covered = [b for b in bags if table.has_prior(b.pair_key)]
    if not covered:
        return float("nan")
    total, count = 0.0, 0
    for i in range(0, len(covered), batch_size):
        chunk = covered[i:i + batch_size]
        batch = make_batch(chunk)
        mu = model.posterior_mean(batch)
        priors = table.matrix(batch.pair_keys)[batch.bag_ids]
        total += float(np.linalg.norm(mu - priors, axis=1).sum())
        count += mu.shape[0]
    return total / count


def _validation_auc(model: JointModel, val_bags: Sequence[Bag], batch_size: int) -> float:
    return pr_auc(collect_predictions(model, val_bags, batch_size))


def train(model: JointModel, train_bags: Sequence[Bag], val_bags: Sequence[Bag], cfg: TrainConfig,
          rng: np.random.Generator, prior_table: PriorTable | None = None, out_dir=None,
          fingerprint: str = "", track_prior_distance: bool = False) -> TrainResult:
    """Train until early stopping; the model ends up holding the best epoch's parameters.

    One JSON line per epoch goes to ``<out_dir>/metrics.jsonl``.  Checkpoints
    are ``epoch_<n>.bvae`` (when ``save_every_epoch``) and ``best.bvae``.
    """
    cfg.validate()
    if not train_bags:
        raise ValueError("empty training set")
    if not val_bags:
        raise ValueError("empty validation set")
    use_prior = model.dims.has_vae and cfg.prior_mode == "kb"
    if use_prior and prior_table is None:
        raise ValueError("prior mode 'kb' needs a prior table")
    if use_prior and prior_table.dim != model.dims.latent_dim:
        raise ValueError(f"prior table has {prior_table.dim} dims, model latent has {model.dims.latent_dim}")
    if cfg.filter_prior_only and use_prior:
        train_bags = [b for b in train_bags if prior_table.has_prior(b.pair_key)]
        if not train_bags:
            raise ValueError("no training bag has a KB prior")

    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w")

    steps_per_epoch = math.ceil(len(train_bags) / cfg.batch_size)
    k, x0 = anneal_schedule(cfg, steps_per_epoch)
    opt = AdamState(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    stopper = EarlyStopper(cfg.patience)
    state = TrainState()
    history: list[dict] = []
    best_params = model.copy_params()
    track = track_prior_distance and use_prior
    init_dist = prior_distance(model, train_bags, prior_table) if track else None

    try:
        for epoch in range(1, cfg.max_epochs + 1):
            state.epoch = epoch
            order = rng.permutation(len(train_bags))
            bags = [subsample_bag(train_bags[i], cfg.bag_cap, rng) for i in order]
            sums = {"loss": 0.0, "bce": 0.0, "rec": 0.0, "kl": 0.0}
            seen = 0
            beta = 1.0
            for chunk in make_batches(bags, cfg.batch_size, rng):
                batch = make_batch(chunk)
                noise = draw_noise(rng, batch, model.dims, cfg.input_dropout, cfg.word_dropout, cfg.teacher_force)
                priors = prior_table.matrix(batch.pair_keys) if use_prior else None
                beta = beta_at(state.global_step, k, x0, cfg.prior_mode) if model.dims.has_vae else 0.0
                result = model.forward(batch, noise, priors, beta, cfg.lam)
                backward(result.loss)
                adam_step(opt, model.params)
                zero_grads(model.params)
                state.global_step += 1
                nb = batch.num_bags
                seen += nb
                for key in sums:
                    sums[key] += result.components.get(key, 0.0) * nb
            val_auc = _validation_auc(model, val_bags, cfg.eval_batch_size)
            improved = stopper.update(val_auc, epoch)
            record = {"epoch": epoch, "step": state.global_step, "beta": beta,
                      **{key: value / seen for key, value in sums.items()}, "val_auc": val_auc}
            if track:
                record["prior_distance"] = prior_distance(model, train_bags, prior_table)
            if improved:
                best_params = model.copy_params()
            state.best_auc, state.best_epoch = stopper.best, stopper.best_epoch
            state.since_improvement = stopper.since_improvement
            record["best_epoch"] = state.best_epoch
            history.append(record)
            log.info("epoch %d loss %.4f val_auc %.4f", epoch, record["loss"], val_auc)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
                metrics_fh.flush()
            if out is not None:
                meta = {"epoch": epoch, "val_auc": val_auc}
                if cfg.save_every_epoch:
                    save_checkpoint(out / f"epoch_{epoch}.bvae", model, fingerprint, opt, meta)
                if improved:
                    save_checkpoint(out / "best.bvae", model, fingerprint, opt, meta)
            if stopper.should_stop:
                break
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    state.rng_state = rng.bit_generator.state
    model.load_params(best_params)
    return TrainResult(state, history, best_params, init_dist)
