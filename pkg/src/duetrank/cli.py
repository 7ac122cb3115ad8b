"""Command-line entry point.

Subcommands: gen-corpus, train, build-index, eval, bench, chat.
Option precedence is flag > config file > built-in default; the resolved
configuration is logged as JSON under --out-dir for every run.

The config file is flat ``key = value`` text; keys match the long flag
names with dashes replaced by underscores.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import load_corpus, make_synthetic_corpus, save_corpus, attach_candidates
from .encoders import BiEncoder, CrossEncoder, EncoderConfig, load_checkpoint, save_checkpoint
from .index import build_index, load_index, save_index, train_ivf
from .learning import MutualConfig, train_mutual, train_single
from .pipeline import (
    BiEncoderSystem,
    CrossEncoderSystem,
    PipelineConfig,
    TwoStageSystem,
    bench,
    bench_to_csv,
    bench_to_json,
    evaluate,
    rerank,
    retrieve_candidates,
)
from .text import Vocabulary, build_vocab

# Defaults follow the published training setup where one exists.
DEFAULTS = {
    "seed": 0,
    "out_dir": "runs",
    # encoder
    "model_dim": 64,
    "n_layers": 2,
    "n_heads": 4,
    "ffn_dim": 128,
    "projection_dim": 64,
    "dropout": 0.1,
    # training
    "alpha": 1.0,
    "tau": 3.0,
    "delta_r": 32,
    "epochs": 3,
    "batch_size": 8,
    "lr": 3e-5,
    "warmup_fraction": 0.1,
    "clip": 10.0,
    "patience": 3,
    # pipeline
    "n_r": 100,
    "strategy": "selector_only",
    # gen-corpus
    "n_examples": 1000,
    "n_topics": 10,
    "vocab_size": 400,
    "candidates": 0,
    "hard_fraction": 0.4,
    # index
    "ivf_clusters": 0,
    "ivf_iters": 20,
}


def _read_config_file(path: str) -> dict:
    cfg = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        cfg[key.replace("-", "_")] = value
    return cfg


def _coerce(value, like):
    if isinstance(like, bool):
        return str(value).lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return str(value)


class Settings:
    """Layered option lookup: CLI flag, then config file, then default."""

    def __init__(self, args: argparse.Namespace):
        self.flags = {k: v for k, v in vars(args).items() if v is not None}
        self.file_cfg = _read_config_file(args.config) if getattr(args, "config", None) else {}

    def get(self, key: str):
        if key in self.flags:
            return self.flags[key]
        default = DEFAULTS.get(key)
        if key in self.file_cfg:
            return _coerce(self.file_cfg[key], default)
        return default

    def resolved(self, keys) -> dict:
        return {k: self.get(k) for k in keys}


def _log_config(settings: Settings, command: str, keys) -> Path:
    out_dir = Path(settings.get("out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {"command": command, **settings.resolved(keys)}
    path = out_dir / f"{command.replace('-', '_')}_config.json"
    path.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out_dir


def _encoder_config(settings: Settings, vocab: Vocabulary) -> EncoderConfig:
    return EncoderConfig(
        vocab_size=len(vocab),
        model_dim=settings.get("model_dim"),
        n_layers=settings.get("n_layers"),
        n_heads=settings.get("n_heads"),
        ffn_dim=settings.get("ffn_dim"),
        projection_dim=settings.get("projection_dim"),
        dropout_rate=settings.get("dropout"),
    )


def _mutual_config(settings: Settings) -> MutualConfig:
    return MutualConfig(
        alpha=settings.get("alpha"),
        tau=settings.get("tau"),
        delta_r=settings.get("delta_r"),
        epochs=settings.get("epochs"),
        batch_size=settings.get("batch_size"),
        peak_lr=settings.get("lr"),
        warmup_fraction=settings.get("warmup_fraction"),
        clip_threshold=settings.get("clip"),
        patience=settings.get("patience"),
        seed=settings.get("seed"),
    )


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    settings = Settings(args)
    keys = ["seed", "n_examples", "n_topics", "vocab_size", "candidates", "hard_fraction", "out_dir"]
    _log_config(settings, "gen-corpus", keys)
    rng = np.random.default_rng(settings.get("seed"))
    corpus = make_synthetic_corpus(
        n_examples=settings.get("n_examples"),
        vocab_size=settings.get("vocab_size"),
        n_topics=settings.get("n_topics"),
        rng=rng,
    )
    n_cands = settings.get("candidates")
    if n_cands:
        corpus = attach_candidates(corpus, n_cands, rng, hard_fraction=settings.get("hard_fraction"))
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus.examples)} examples ({corpus.pool_size} pooled responses) to {args.out}")
    return 0


def cmd_train(args) -> int:
    settings = Settings(args)
    keys = [
        "seed", "model_dim", "n_layers", "n_heads", "ffn_dim", "projection_dim", "dropout",
        "alpha", "tau", "delta_r", "epochs", "batch_size", "lr", "warmup_fraction", "clip",
        "patience", "out_dir",
    ]
    out_dir = _log_config(settings, "train", keys)
    corpus = load_corpus(args.corpus)
    val_corpus = load_corpus(args.val_corpus) if args.val_corpus else None
    vocab = build_vocab(
        [tok for ex in corpus.examples for tok in list(ex.context) + [ex.response]],
        min_freq=1,
    )
    vocab_path = Path(args.vocab_out) if args.vocab_out else out_dir / "vocab.txt"
    vocab.save(vocab_path)
    enc_cfg = _encoder_config(settings, vocab)
    cfg = _mutual_config(settings)
    rng = np.random.default_rng(cfg.seed)
    report = None
    if args.mode == "mutual":
        retriever = BiEncoder(enc_cfg, rng)
        selector = CrossEncoder(enc_cfg, rng)
        report = train_mutual(corpus, retriever, selector, cfg, vocab, val_corpus=val_corpus)
        save_checkpoint(retriever, args.retriever_out or out_dir / "retriever.ckpt")
        save_checkpoint(selector, args.selector_out or out_dir / "selector.ckpt")
    elif args.mode == "single-bi":
        retriever = BiEncoder(enc_cfg, rng)
        report = train_single(corpus, retriever, cfg, vocab, val_corpus=val_corpus)
        save_checkpoint(retriever, args.retriever_out or out_dir / "retriever.ckpt")
    elif args.mode == "single-cross":
        selector = CrossEncoder(enc_cfg, rng)
        report = train_single(corpus, selector, cfg, vocab, val_corpus=val_corpus)
        save_checkpoint(selector, args.selector_out or out_dir / "selector.ckpt")
    report.to_jsonl(out_dir / "train_report.jsonl")
    last = report.epochs[-1] if report.epochs else {}
    print(f"training done; final epoch record: {json.dumps(last)}")
    return 0


def cmd_build_index(args) -> int:
    settings = Settings(args)
    out_dir = _log_config(settings, "build-index", ["seed", "ivf_clusters", "ivf_iters", "out_dir"])
    corpus = load_corpus(args.corpus)
    vocab = Vocabulary.load(args.vocab)
    bi = load_checkpoint(args.retriever)
    index = build_index(corpus.response_pool, bi, vocab)
    n_clusters = settings.get("ivf_clusters")
    if n_clusters:
        index = train_ivf(
            index, n_clusters, n_iters=settings.get("ivf_iters"),
            rng=np.random.default_rng(settings.get("seed")),
        )
    save_index(index, args.out)
    print(f"indexed {index.size} responses (dim {index.dim}, ivf clusters {index.n_clusters}) -> {args.out}")
    return 0


def _load_system(args, settings: Settings):
    vocab = Vocabulary.load(args.vocab)
    index = load_index(args.index) if args.index else None
    bi = load_checkpoint(args.retriever) if args.retriever else None
    cross = load_checkpoint(args.selector) if args.selector else None
    pipe_cfg = PipelineConfig(
        n_r=settings.get("n_r"),
        strategy=settings.get("strategy"),
        nprobe=args.nprobe,
    )
    kind = args.system
    if kind == "bi":
        system = BiEncoderSystem(bi, vocab, index=index)
    elif kind == "cross":
        system = CrossEncoderSystem(cross, vocab)
    else:
        system = TwoStageSystem(bi, cross, vocab, index, pipe_cfg)
    return system, vocab, index, bi, cross, pipe_cfg


def cmd_eval(args) -> int:
    settings = Settings(args)
    out_dir = _log_config(settings, "eval", ["seed", "n_r", "strategy", "out_dir"])
    corpus = load_corpus(args.corpus)
    system, *_ = _load_system(args, settings)
    ks = [int(k) for k in args.ks.split(",")]
    report = evaluate(corpus, system, ks)
    report.to_json(out_dir / "metrics.json")
    print(report)
    return 0


def cmd_bench(args) -> int:
    settings = Settings(args)
    out_dir = _log_config(settings, "bench", ["seed", "strategy", "out_dir"])
    corpus = load_corpus(args.corpus)
    vocab = Vocabulary.load(args.vocab)
    index = load_index(args.index) if args.index else None
    bi = load_checkpoint(args.retriever)
    cross = load_checkpoint(args.selector)
    n_r_values = [int(v) for v in args.n_r_values.split(",")]
    systems = {"cross_full": CrossEncoderSystem(cross, vocab), "bi_only": BiEncoderSystem(bi, vocab, index=index)}
    for n_r in n_r_values:
        cfg = PipelineConfig(n_r=n_r, strategy=settings.get("strategy"))
        systems[f"two_stage_nr{n_r}"] = TwoStageSystem(bi, cross, vocab, index, cfg)
    rows = bench(corpus, systems, vocab)
    bench_to_csv(rows, out_dir / "bench.csv")
    bench_to_json(rows, out_dir / "bench.json")
    for row in rows:
        print(
            f"{row.variant}: n_r={row.n_r} hits@1={row.hits1:.4f} mrr={row.mrr:.4f} "
            f"joint/query={row.joint_passes_per_query:.1f} ms/query={row.ms_per_query:.2f}"
        )
    return 0


def cmd_chat(args) -> int:
    settings = Settings(args)
    _log_config(settings, "chat", ["seed", "n_r", "strategy", "out_dir"])
    vocab = Vocabulary.load(args.vocab)
    index = load_index(args.index)
    bi = load_checkpoint(args.retriever)
    cross = load_checkpoint(args.selector)
    corpus = load_corpus(args.corpus)
    cfg = PipelineConfig(n_r=settings.get("n_r"), strategy=settings.get("strategy"), nprobe=args.nprobe)
    context: list = []
    try:
        for line in sys.stdin:
            line = line.strip()
            if not line:
                continue
            if line == ":quit":
                break
            if line == ":reset":
                context.clear()
                print("(context cleared)")
                continue
            context.append(tuple(line.split()))
            pre = retrieve_candidates(context, bi, index, cfg.n_r, vocab, cfg.nprobe)
            ranked = rerank(context, pre, cross, cfg.strategy, vocab, corpus.response_pool)
            top = ranked[0]
            response = corpus.response_pool[top.response_id]
            if args.verbose:
                g_by_id = {hit.response_id: hit.score for hit in pre}
                for hit in ranked[: min(5, cfg.n_r)]:
                    g = g_by_id[hit.response_id]
                    s = hit.score if cfg.strategy == "selector_only" else hit.score - g
                    text = " ".join(corpus.response_pool[hit.response_id])
                    print(f"  [g={g:+.4f} s={s:.4f} total={g + s:+.4f}] {text}")
            print(" ".join(response))
            context.append(tuple(response))
    except (EOFError, KeyboardInterrupt):
        pass
    return 0


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="duetrank", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")

    p = sub.add_parser("gen-corpus", help="generate a synthetic topic-clustered corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-examples", type=int)
    p.add_argument("--n-topics", type=int)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--candidates", type=int, help="attach fixed candidate lists of this size")
    p.add_argument("--hard-fraction", type=float)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train models (single or mutual)")
    common(p)
    p.add_argument("--mode", choices=["single-bi", "single-cross", "mutual"], default="mutual")
    p.add_argument("--corpus", required=True)
    p.add_argument("--val-corpus")
    p.add_argument("--vocab-out")
    p.add_argument("--retriever-out")
    p.add_argument("--selector-out")
    for flag, typ in [
        ("--model-dim", int), ("--n-layers", int), ("--n-heads", int), ("--ffn-dim", int),
        ("--projection-dim", int), ("--dropout", float), ("--alpha", float), ("--tau", float),
        ("--delta-r", int), ("--epochs", int), ("--batch-size", int), ("--lr", float),
        ("--warmup-fraction", float), ("--clip", float), ("--patience", int),
    ]:
        p.add_argument(flag, type=typ)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-index", help="encode the response pool into a MIPS index")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--retriever", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ivf-clusters", type=int)
    p.add_argument("--ivf-iters", type=int)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("eval", help="compute hits@k and MRR for a system")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--index")
    p.add_argument("--retriever")
    p.add_argument("--selector")
    p.add_argument("--system", choices=["bi", "cross", "two-stage"], default="two-stage")
    p.add_argument("--n-r", dest="n_r", type=int)
    p.add_argument("--strategy", choices=["selector_only", "ensemble"])
    p.add_argument("--nprobe", type=int)
    p.add_argument("--ks", default="1,2,5,10")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="accuracy / compute-proxy / latency sweep over n_r")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--index")
    p.add_argument("--retriever", required=True)
    p.add_argument("--selector", required=True)
    p.add_argument("--strategy", choices=["selector_only", "ensemble"])
    p.add_argument("--n-r-values", default="10,50,100,200,500,800")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("chat", help="interactive retrieve-and-rerank REPL")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--retriever", required=True)
    p.add_argument("--selector", required=True)
    p.add_argument("--n-r", dest="n_r", type=int)
    p.add_argument("--strategy", choices=["selector_only", "ensemble"])
    p.add_argument("--nprobe", type=int)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_chat)

    return parser


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
