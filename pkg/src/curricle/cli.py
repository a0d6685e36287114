"""Command-line front end.

Experiments are described by flat ``key = value`` config files; every key also
has a ``--key`` flag that overrides the file. ``CURRICLE_SEED`` in the
environment overrides the file's seed (a ``--seed`` flag still wins).
"""

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import corpus, neighbors, schedules, seqmodel, trainer
from .schedules import ScheduleSpec

EXIT_USAGE = 2


class ConfigError(ValueError):
    def __init__(self, key, msg):
        super().__init__(f"{key}: {msg}")
        self.key = key


def _int(v):
    return int(v)


def _float(v):
    x = float(v)
    if not math.isfinite(x):
        raise ValueError("not finite")
    return x


def _bool(v):
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _str(v):
    return str(v).strip()


# key -> (parser, default, help)
KEYS = {
    "train": (_str, None, "training corpus"),
    "valid": (_str, None, "validation corpus"),
    "test": (_str, None, "test corpus (optional)"),
    "embeddings": (_str, None, "word-vector file, required for source=nnrs"),
    "out": (_str, "run", "output directory"),
    "source": (_str, "none", "replacement source: none, nnrs or tprs"),
    "epochs": (_int, 40, "training epochs"),
    "lr0": (_float, 20.0, "initial learning rate"),
    "lr_min": (_float, 0.0, "final learning rate"),
    "batch_size": (_int, 30, "training batch size"),
    "eval_batch_size": (_int, 10, "evaluation batch size"),
    "bptt_len": (_int, 35, "truncated BPTT window"),
    "clip": (_float, 0.5, "global gradient-norm threshold"),
    "ss.kind": (_str, "static", "prediction-feedback curve"),
    "ss.start": (_float, 0.0, "prediction-feedback start rate"),
    "ss.end": (_float, 0.0, "prediction-feedback end rate"),
    "ss.feedback": (_str, "greedy", "fed-back prediction: greedy or sample"),
    "nnrs.kind": (_str, "static", "neighbour-replacement curve"),
    "nnrs.start": (_float, 0.0, "neighbour-replacement start rate"),
    "nnrs.end": (_float, 0.0, "neighbour-replacement end rate"),
    "k": (_int, None, "neighbours per word (default round(log2|V|))"),
    "tau0": (_float, 0.1, "initial neighbour temperature"),
    "seed": (_int, 0, "random seed"),
    "d_emb": (_int, 200, "embedding size"),
    "hidden": (_int, 200, "LSTM hidden size"),
    "layers": (_int, 2, "LSTM layers"),
    "tied": (_bool, True, "tie embedding and output weights"),
    "min_count": (_int, 1, "minimum token count kept in the vocabulary"),
}


def read_config(path):
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    raw = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}", "expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = value
    return raw


def resolve_config(raw):
    """Parse raw string values into a complete, typed config dict."""
    for key in raw:
        if key not in KEYS:
            raise ConfigError(key, "unknown key")
    cfg = {}
    for key, (parse, default, _) in KEYS.items():
        if key in raw and raw[key] is not None and raw[key] != "":
            try:
                cfg[key] = parse(raw[key])
            except ValueError as e:
                raise ConfigError(key, str(e)) from None
        else:
            cfg[key] = default
    return cfg


def validate_config(cfg):
    for key in ("train", "valid"):
        if not cfg[key]:
            raise ConfigError(key, "required")
    for key in ("train", "valid", "test", "embeddings"):
        if cfg[key] and not Path(cfg[key]).is_file():
            raise ConfigError(key, f"no such file {cfg[key]}")
    if cfg["source"] not in trainer.SOURCES:
        raise ConfigError("source", f"must be one of {trainer.SOURCES}")
    for key in ("epochs", "batch_size", "eval_batch_size", "bptt_len", "d_emb", "hidden",
                "layers", "min_count"):
        if cfg[key] < 1:
            raise ConfigError(key, "must be >= 1")
    if cfg["k"] is not None and cfg["k"] < 1:
        raise ConfigError("k", "must be >= 1")
    if cfg["clip"] <= 0:
        raise ConfigError("clip", "must be positive")
    if cfg["lr_min"] < 0:
        raise ConfigError("lr_min", "must be >= 0")
    if cfg["lr0"] <= cfg["lr_min"]:
        raise ConfigError("lr0", "must exceed lr_min")
    if not 0 < cfg["tau0"] <= 1:
        raise ConfigError("tau0", "must lie in (0, 1]")
    for prefix in ("ss", "nnrs"):
        if cfg[f"{prefix}.kind"] not in schedules.KINDS:
            raise ConfigError(f"{prefix}.kind", f"must be one of {schedules.KINDS}")
        for end in ("start", "end"):
            if not 0 <= cfg[f"{prefix}.{end}"] <= 1:
                raise ConfigError(f"{prefix}.{end}", "must lie in [0, 1]")
        if cfg[f"{prefix}.start"] > cfg[f"{prefix}.end"]:
            raise ConfigError(f"{prefix}.start", f"exceeds {prefix}.end")
    if cfg["ss.feedback"] not in trainer.FEEDBACK:
        raise ConfigError("ss.feedback", f"must be one of {trainer.FEEDBACK}")
    if cfg["tied"] and cfg["d_emb"] != cfg["hidden"]:
        raise ConfigError("d_emb", "must equal hidden when tied")
    if cfg["source"] == "none" and cfg["nnrs.end"] > 0:
        raise ConfigError("nnrs.end", "needs source nnrs or tprs")
    if cfg["source"] == "nnrs" and not cfg["embeddings"]:
        raise ConfigError("embeddings", "required for source nnrs")


def to_train_config(cfg):
    n = cfg["epochs"]
    return trainer.TrainConfig(
        lr0=cfg["lr0"], lr_min=cfg["lr_min"], total_epochs=n,
        batch_size=cfg["batch_size"], eval_batch_size=cfg["eval_batch_size"],
        bptt_len=cfg["bptt_len"], clip=cfg["clip"],
        ss_schedule=ScheduleSpec(cfg["ss.kind"], cfg["ss.start"], cfg["ss.end"], n),
        nnrs_schedule=ScheduleSpec(cfg["nnrs.kind"], cfg["nnrs.start"], cfg["nnrs.end"], n),
        replacement_source=cfg["source"], seed=cfg["seed"], d_emb=cfg["d_emb"],
        hidden=cfg["hidden"], n_layers=cfg["layers"], tied=cfg["tied"], k=cfg["k"],
        tau0=cfg["tau0"], min_count=cfg["min_count"], feedback=cfg["ss.feedback"],
    )


def _fail(msg, code=EXIT_USAGE):
    print(f"error: {msg}", file=sys.stderr)
    return code


def cmd_train(args):
    try:
        raw = read_config(args.config) if args.config else {}
        if "CURRICLE_SEED" in os.environ:
            raw["seed"] = os.environ["CURRICLE_SEED"]
        for key in KEYS:
            v = getattr(args, key)
            if v is not None:
                raw[key] = v
        cfg = resolve_config(raw)
        validate_config(cfg)
        tcfg = to_train_config(cfg)
    except (OSError, ConfigError) as e:
        return _fail(str(e))
    try:
        result = trainer.run_training(
            tcfg, cfg["train"], cfg["valid"], cfg["test"], cfg["embeddings"],
            out_dir=cfg["out"], resume=args.resume,
        )
    except (ValueError, FloatingPointError) as e:
        return _fail(str(e), 1)
    test = "nan" if result.test_ppl is None else repr(result.test_ppl)
    print(f"best_valid={result.best_valid!r} test={test}")
    return 0


def _load_model(path):
    params, state = seqmodel.load_checkpoint(path)
    if "vocab" not in state:
        raise ValueError(f"{path}: checkpoint carries no vocabulary")
    return params, state, corpus.Vocabulary(state["vocab"])


def cmd_eval(args):
    try:
        params, state, vocab = _load_model(args.checkpoint)
        stream = corpus.load_corpus(args.corpus, vocab)
        batch_size = args.batch_size or state.get("eval_batch_size", 10)
        bptt = args.bptt_len or state.get("bptt_len", 35)
        batches = corpus.batchify(stream, batch_size, bptt)
    except (OSError, ValueError) as e:
        return _fail(str(e))
    print(f"ppl={trainer.evaluate(params, batches)!r}")
    return 0


def cmd_generate(args):
    try:
        params, _, vocab = _load_model(args.checkpoint)
        prefix = vocab.encode(args.prefix.split())
        gcfg = seqmodel.GenerationConfig(args.max_len, args.alpha, args.mode, vocab.eos_id)
    except (OSError, ValueError) as e:
        return _fail(str(e))
    if not prefix:
        return _fail("prefix must contain at least one token")
    ids, score = seqmodel.generate(params, prefix, gcfg, np.random.default_rng(args.seed))
    print(" ".join(vocab.decode(ids)))
    print(f"score={score!r}")
    return 0


def cmd_build_neighbors(args):
    try:
        vocab = corpus.Vocabulary.load(args.vocab)
        k = args.k if args.k is not None else neighbors.default_k(len(vocab))
        if not 1 <= k < len(vocab):
            return _fail(f"k={k} must satisfy 1 <= k < |V|={len(vocab)}")
        emb = neighbors.load_embeddings(args.embeddings, vocab, seed=args.seed)
        table = neighbors.build_neighbor_table(emb, k)
    except (OSError, ValueError) as e:
        return _fail(str(e))
    neighbors.save_table(table, args.out)
    print(f"coverage={emb.coverage:.4f} k={k}")
    return 0


def cmd_inspect_schedule(args):
    try:
        spec = ScheduleSpec(args.kind, args.start, args.end, args.epochs)
    except ValueError as e:
        return _fail(str(e))
    lines = ["epoch,rate"]
    for e in range(args.epochs + 1):
        lines.append(f"{e},{schedules.rate(spec, e)!r}")
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


# (name, ss.start, ss.end, nnrs.start, nnrs.end, source)
GRID_ROWS = [
    ("no-sampling", 0.0, 0.0, 0.0, 0.0, "none"),
    ("tprs-1", 0.0, 0.0, 0.0, 0.2, "tprs"),
    ("tprs-2", 0.0, 0.0, 0.0, 0.3, "tprs"),
    ("tprs-3", 0.0, 0.0, 0.0, 0.5, "tprs"),
    ("nnrs-1", 0.0, 0.0, 0.0, 0.2, "nnrs"),
    ("nnrs-2", 0.0, 0.0, 0.0, 0.3, "nnrs"),
    ("nnrs-3", 0.0, 0.0, 0.0, 0.5, "nnrs"),
    ("ss-1", 0.0, 0.2, 0.0, 0.0, "none"),
    ("ss-2", 0.0, 0.3, 0.0, 0.0, "none"),
    ("ss-3", 0.0, 0.5, 0.0, 0.0, "none"),
    ("ss-4", 0.0, 0.8, 0.0, 0.0, "none"),
    ("ss-nnrs-1", 0.0, 0.2, 0.0, 0.2, "nnrs"),
    ("ss-nnrs-2", 0.0, 0.3, 0.0, 0.3, "nnrs"),
    ("ss-nnrs-3", 0.0, 0.5, 0.0, 0.2, "nnrs"),
    ("ss-nnrs-4", 0.2, 0.5, 0.2, 0.5, "nnrs"),
    ("ss-nnrs-5", 0.0, 0.5, 0.0, 0.5, "nnrs"),
    ("ss-nnrs-6", 0.0, 0.8, 0.0, 0.2, "nnrs"),
    ("ss-nnrs-7", 0.2, 0.8, 0.2, 0.5, "nnrs"),
]


def cmd_grid(args):
    """Write one config per (row, curve) of the rate grid, layered on a base config."""
    try:
        base = read_config(args.base) if args.base else {}
        for key in base:
            if key not in KEYS:
                raise ConfigError(key, "unknown key")
    except (OSError, ConfigError) as e:
        return _fail(str(e))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, ss0, ss1, nn0, nn1, source in GRID_ROWS:
        for kind in schedules.KINDS:
            tag = f"{name}_{kind}"
            cfg = dict(base)
            cfg.update({
                "ss.kind": kind, "ss.start": ss0, "ss.end": ss1,
                "nnrs.kind": kind, "nnrs.start": nn0, "nnrs.end": nn1,
                "source": source, "out": str(Path(base.get("out", "runs")) / tag),
            })
            with open(out / f"{tag}.cfg", "w", encoding="utf-8", newline="\n") as f:
                for key in KEYS:
                    if key in cfg:
                        f.write(f"{key} = {cfg[key]}\n")
            print(out / f"{tag}.cfg")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="curricle", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one experiment",
                       description="Config keys (each also accepted as --key): "
                       + ", ".join(KEYS))
    t.add_argument("config", nargs="?", help="key = value config file")
    t.add_argument("--resume", action="store_true", help="continue from out/last.ckpt")
    for key, (_, default, help_) in KEYS.items():
        t.add_argument(f"--{key}", dest=key, default=None, metavar="V",
                       help=f"{help_} (default {default})")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="perplexity of a checkpoint on a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--batch-size", type=int, default=None)
    e.add_argument("--bptt-len", type=int, default=None)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("generate", help="continue a prefix from a checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--prefix", required=True, help="whitespace-separated tokens")
    g.add_argument("--max-len", type=int, default=50)
    g.add_argument("--alpha", type=float, default=1.0, help="length-penalty exponent")
    g.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("build-neighbors", help="precompute a neighbour table cache")
    b.add_argument("--embeddings", required=True)
    b.add_argument("--vocab", required=True, help="one token per line, line number = id")
    b.add_argument("--k", type=int, default=None)
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int, default=0, help="seed for uncovered rows")
    b.set_defaults(func=cmd_build_neighbors)

    s = sub.add_parser("inspect-schedule", help="print epoch,rate CSV for a curve")
    s.add_argument("--kind", required=True)
    s.add_argument("--start", type=float, default=0.0)
    s.add_argument("--end", type=float, default=1.0)
    s.add_argument("--epochs", type=int, default=40)
    s.set_defaults(func=cmd_inspect_schedule)

    r = sub.add_parser("grid", help="emit configs for the curve x rate grid")
    r.add_argument("--base", help="config file every grid entry starts from")
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_grid)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
