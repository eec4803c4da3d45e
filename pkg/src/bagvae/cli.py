"""Command-line entry point: ``bagvae <command> [--config PATH] [flags]``.

Every command resolves its configuration as defaults < config file <
``BVAE_SEED`` < flags, writes ``resolved_config.json`` to its output
directory, and reports failures as one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import corpus, evaluate, harness, kb
from .config import ConfigError, RunConfig
from .model import CheckpointMismatch, JointModel, ModelDims, load_checkpoint

log = logging.getLogger("bagvae")

SEED_ENV = "BVAE_SEED"


class CliError(Exception):
    pass


# -- configuration ------------------------------------------------------------------------

_PATH_FLAGS = {
    "train": "train_corpus",
    "val": "val_corpus",
    "test": "test_corpus",
    "triples": "triples",
    "eval_pairs": "eval_pairs",
    "vectors": "pretrained_vectors",
}


def resolve_config(args) -> RunConfig:
    overrides = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            overrides = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(overrides, dict):
            raise ConfigError(f"{path}: top level must be an object")
    cfg = config_mod.from_dict(overrides, args.preset)
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from exc
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.paths.out_dir = args.out
    for flag, key in _PATH_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg.paths, key, value)
    cfg.validate()
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.save(cfg, out / "resolved_config.json")
    return out


def _require(path, what: str) -> Path:
    if path is None:
        raise CliError(f"{what} required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _data_dir(args, out: Path) -> Path:
    return Path(args.data) if args.data else out


def _ensure_preprocessed(args, cfg: RunConfig, data: Path) -> None:
    """Run preprocessing into ``data`` when its caches are missing and corpus paths are known."""
    if (data / "vocab.tsv").exists() or cfg.paths.train_corpus is None:
        return
    log.info("no preprocessed caches in %s; preprocessing first", data)
    sub_cfg = config_mod.from_dict(cfg.to_dict())
    sub_cfg.paths.out_dir = str(data)
    cmd_preprocess(args, sub_cfg)


def _load_vocab(data: Path) -> corpus.Vocabulary:
    _require(data / "vocab.tsv", "vocabulary (run preprocess first)")
    return corpus.Vocabulary.load(data / "vocab.tsv", data / "relations.txt")


def _load_split(data: Path, split: str) -> list[corpus.Bag]:
    return corpus.load_bags(_require(data / f"{split}.bags", f"{split} cache (run preprocess first)"))


def _load_model(args, cfg: RunConfig) -> JointModel:
    path = _require(args.checkpoint, "checkpoint")
    model, meta, _ = load_checkpoint(path, cfg.fingerprint(), force=args.force)
    return model


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands -----------------------------------------------------------------------------

def cmd_preprocess(args, cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    train_raw = corpus.read_corpus(_require(cfg.paths.train_corpus, "training corpus"))
    test_raw = corpus.read_corpus(_require(cfg.paths.test_corpus, "test corpus"))
    val_raw = corpus.read_corpus(_require(cfg.paths.val_corpus, "validation corpus")) \
        if cfg.paths.val_corpus else None
    result = corpus.preprocess(train_raw, test_raw, val_raw, max_len=cfg.data.max_len,
                               top_k=cfg.data.vocab_top_k, val_fraction=cfg.data.val_fraction,
                               na_relation=cfg.data.na_relation, seed=cfg.seed)
    result.vocab.save(out / "vocab.tsv", out / "relations.txt")
    for split in ("train", "val", "test"):
        corpus.save_bags(out / f"{split}.bags", getattr(result, split))
    _write_json(out / "preprocess_report.json", result.report)
    return result.report


def cmd_kb_train(args, cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    triples = kb.load_triples(_require(cfg.paths.triples, "triples file"))
    eval_pairs = kb.load_pairs(_require(cfg.paths.eval_pairs, "eval pair list"))
    data = _data_dir(args, out)
    _ensure_preprocessed(args, cfg, data)
    pairs = [b.pair_key for split in ("train", "val") for b in _load_split(data, split)]
    if cfg.transe.prune_validation:
        blocked = eval_pairs + [b.pair_key for b in _load_split(data, "val")]
    else:
        blocked = eval_pairs
    pruned = kb.prune_eval_links(triples, blocked)
    emb = kb.transe_train(pruned, cfg.transe, latent_dim=cfg.model.latent_dim, seed=cfg.seed,
                          log_every=args.log_every)
    emb.save(out / "kb_embeddings.bvae")
    table = kb.build_prior_table(emb, pairs)
    table.save(out / "prior.bin")
    pos, neg = kb.distance_margin(emb, pruned, np.random.default_rng(cfg.seed))
    report = {"triples": len(triples), "pruned": len(triples) - len(pruned), "kept": len(pruned),
              "entities": len(emb.entities), "relations": len(emb.relations),
              "pairs": len(table.means), "coverage": table.coverage,
              "mean_positive_distance": pos, "mean_corrupted_distance": neg}
    _write_json(out / "kb_report.json", report)
    return report


def cmd_train(args, cfg: RunConfig) -> dict:
    from .train import train

    out = _out_dir(cfg)
    data = _data_dir(args, out)
    _ensure_preprocessed(args, cfg, data)
    vocab = _load_vocab(data)
    train_bags = _load_split(data, "train")
    val_bags = _load_split(data, "val")
    table = None
    if cfg.model.mode == "vae" and cfg.train.prior_mode == "kb":
        prior_path = Path(args.prior) if args.prior else data / "prior.bin"
        table = kb.PriorTable.load(_require(prior_path, "prior table (run kb-train first)"))
    rng = np.random.default_rng(cfg.seed)
    dims = ModelDims.from_config(cfg.model, cfg.data, len(vocab), vocab.num_relations)
    vectors = None
    if cfg.paths.pretrained_vectors:
        vectors, found = corpus.load_pretrained_vectors(
            _require(cfg.paths.pretrained_vectors, "pretrained vectors"), vocab, cfg.model.word_dim, rng)
        log.info("pretrained vectors cover %d of %d words", found, len(vocab))
    model = JointModel.create(dims, rng, vectors)
    result = train(model, train_bags, val_bags, cfg.train, rng, table, out, cfg.fingerprint())
    summary = {"best_epoch": result.state.best_epoch, "best_val_auc": result.state.best_auc,
               "epochs": result.state.epoch, "steps": result.state.global_step,
               "checkpoint": str(out / "best.bvae")}
    _write_json(out / "train_summary.json", summary)
    return summary


def cmd_eval(args, cfg: RunConfig) -> dict:
    if args.checkpoint is None:
        raise CliError("checkpoint required")
    out = _out_dir(cfg)
    model = _load_model(args, cfg)
    data = _data_dir(args, out)
    vocab = _load_vocab(data)
    bags = _load_split(data, args.split)
    records = evaluate.collect_predictions(model, bags, cfg.train.eval_batch_size)
    summary = evaluate.summarize(records, (100, 200, 300))
    curve = evaluate.pr_curve(records)
    evaluate.write_pr_csv(out / "pr_curve.csv", curve)
    evaluate.write_pr_svg(out / "pr_curve.svg", curve, label=args.split)
    evaluate.write_predictions(out / "predictions.jsonl", records, vocab.relations)
    summary["split"] = args.split
    _write_json(out / "eval.json", summary)
    return summary


def cmd_reconstruct(args, cfg: RunConfig) -> dict:
    if args.checkpoint is None:
        raise CliError("checkpoint required")
    out = _out_dir(cfg)
    model = _load_model(args, cfg)
    data = _data_dir(args, out)
    vocab = _load_vocab(data)
    bags = _load_split(data, args.split)
    rng = np.random.default_rng(cfg.seed)
    sents = [s for b in bags for s in b.sentences][:args.limit]
    lines = []
    for s in sents:
        ids = evaluate.strip_eos(evaluate.reconstruct(model, s, args.mode, args.max_steps, rng))
        lines.append(f"{' '.join(vocab.tokens(s.token_ids))}\t{' '.join(vocab.tokens(ids))}")
    (out / "reconstructions.tsv").write_text("input\toutput\n" + "".join(line + "\n" for line in lines))
    for line in lines:
        src, dst = line.split("\t")
        print(f"IN : {src}\nOUT: {dst}\n")
    return {"sentences": len(lines), "mode": args.mode}


def cmd_dump_latents(args, cfg: RunConfig) -> dict:
    if args.checkpoint is None:
        raise CliError("checkpoint required")
    out = _out_dir(cfg)
    model = _load_model(args, cfg)
    data = _data_dir(args, out)
    bags = _load_split(data, args.split)
    rows = evaluate.dump_latents(model, bags, args.sample_per_bag, np.random.default_rng(cfg.seed),
                                 cfg.data.na_relation)
    evaluate.write_latents_csv(out / "latents.csv", rows)
    return {"rows": len(rows)}


SYNTH_OVERRIDES = {
    "model": {"word_dim": 32, "pos_dim": 4, "latent_dim": 16, "enc_hidden": 64, "dec_hidden": 64, "rel_dim": 32},
    "train": {"batch_size": 16, "max_epochs": 30},
    "transe": {"max_steps": 2000, "batch_size": 256, "neg_size": 32},
}


def cmd_synth(args, cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    spec = harness.SynthSpec(seed=cfg.seed)
    if args.spec:
        overrides = json.loads(_require(args.spec, "synth spec").read_text())
        for key, value in overrides.items():
            if not hasattr(spec, key):
                raise ConfigError(f"unknown synth spec key {key!r}")
            setattr(spec, key, tuple(value) if key == "split" else value)
    ds = harness.generate(spec)
    paths = ds.write(out)
    run_cfg = json.loads(json.dumps(SYNTH_OVERRIDES))
    run_cfg["seed"] = cfg.seed
    run_cfg["paths"] = {"train_corpus": paths["train"], "val_corpus": paths["val"], "test_corpus": paths["test"],
                        "triples": paths["triples"], "eval_pairs": paths["eval_pairs"]}
    _write_json(out / "synth_config.json", run_cfg)
    return {"train_sentences": len(ds.train), "val_sentences": len(ds.val), "test_sentences": len(ds.test),
            "triples": len(ds.triples), "facts": len(ds.answer_key), "config": str(out / "synth_config.json")}


COMMANDS = {
    "preprocess": cmd_preprocess,
    "kb-train": cmd_kb_train,
    "train": cmd_train,
    "eval": cmd_eval,
    "reconstruct": cmd_reconstruct,
    "dump-latents": cmd_dump_latents,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config overrides")
    common.add_argument("--preset", choices=sorted(config_mod.PRESETS), help="hyper-parameter preset")
    common.add_argument("--seed", type=int, help="overrides the config seed and $BVAE_SEED")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="directory with preprocessed caches (default: --out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="bagvae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="build vocabulary and encoded bag caches")
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--test")

    p = sub.add_parser("kb-train", parents=[common], help="train TransE and write the prior table")
    p.add_argument("--triples")
    p.add_argument("--eval-pairs", dest="eval_pairs")
    p.add_argument("--log-every", type=int, default=0)

    p = sub.add_parser("train", parents=[common], help="train the joint model")
    p.add_argument("--prior", help="prior table (default: <data>/prior.bin)")
    p.add_argument("--vectors", help="pretrained word vectors")

    for name, helptext in (("eval", "PR-AUC and P@N on a split"),
                           ("reconstruct", "greedy sentence reconstructions"),
                           ("dump-latents", "posterior means of positive bags as CSV")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint")
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        p.add_argument("--force", action="store_true", help="ignore a config fingerprint mismatch")
        if name == "reconstruct":
            p.add_argument("--mode", default="mean", choices=("mean", "sample"))
            p.add_argument("--max-steps", dest="max_steps", type=int, default=50)
            p.add_argument("--limit", type=int, default=20)
        if name == "dump-latents":
            p.add_argument("--sample-per-bag", dest="sample_per_bag", type=int, default=2)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--spec", help="JSON overrides for the synthetic generator")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        result = COMMANDS[args.command](args, cfg)
    except (CliError, ConfigError, CheckpointMismatch, FileNotFoundError, ValueError, KeyError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc).strip("'\""), "command": args.command}
        print(json.dumps(record), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0
