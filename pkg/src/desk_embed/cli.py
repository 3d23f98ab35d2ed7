"""Command-line entry point: ``desk-embed <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data.curation import consistency_filter_threshold, consistency_filter_topk, mine_hard_negatives, pack_documents
from .data.pairs import group_by_source, load_pairs, read_jsonl, save_pairs, write_jsonl
from .data.synthetic import SOURCES, build_desk_corpus
from .data.tokenizer import Tokenizer
from .embedders import BagOfWordsEmbedder, ModelEmbedder
from .encoder import Encoder, EncoderConfig, TaskKind
from .eval.extrapolation import extrapolation_sweep, write_sweep
from .eval.retrieval import EVAL_MAX_TOKENS, RetrievalTask, embed_corpus, retrieval_eval
from .rope import RopePolicy
from .trainer.checkpoint import load_checkpoint
from .trainer.plans import Stage, load_plan, tomllib
from .trainer.stage import ContrastiveData, MlmData, run_stage

logger = logging.getLogger("desk_embed")


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _texts(path) -> list[str]:
    """Texts from a JSONL file of ``{"text": ...}`` rows or of pairs (query and document)."""
    out = []
    for row in read_jsonl(path):
        if "text" in row:
            out.append(row["text"])
        else:
            out += [row["query"], row["document"]]
    return out


def _parse_sets(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ValueError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _embedder(source: str, tokenizer: Tokenizer, fit_texts):
    if source == "bow":
        return BagOfWordsEmbedder(tokenizer, fit_texts)
    encoder, _ = load_checkpoint(source)
    return ModelEmbedder(encoder, tokenizer)


# -- commands ---------------------------------------------------------------

def cmd_synth(args) -> None:
    corpus = build_desk_corpus(args.pairs, args.heldout, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_pairs(out / "pretrain.jsonl", corpus.pretrain)
    save_pairs(out / "finetune.jsonl", corpus.finetune)
    write_jsonl(out / "mlm_docs.jsonl", ({"text": d} for d in corpus.mlm_documents))
    RetrievalTask.from_pairs(corpus.heldout).save(out / "queries.jsonl", out / "corpus.jsonl", out / "qrels.jsonl")
    _emit({"pretrain": len(corpus.pretrain), "finetune": len(corpus.finetune), "heldout": len(corpus.heldout),
           "noise_pairs": corpus.noise_pairs, "out": str(out)})


def cmd_build_vocab(args) -> None:
    texts = [t for path in args.input for t in _texts(path)]
    tok = Tokenizer.build(texts, max_size=args.max_size, min_freq=args.min_freq)
    tok.save(args.out)
    _emit({"raw_vocab_size": tok.raw_vocab_size, "padded_vocab_size": tok.padded_vocab_size, "out": args.out})


def cmd_pack(args) -> None:
    tok = Tokenizer.load(args.vocab)
    docs = [tok.encode(t) + [tok.sep_id] for t in _texts(args.input)]
    ids, mask = pack_documents(docs, args.chunk, tok.pad_id)
    np.savez(args.out, ids=ids, mask=mask)
    _emit({"chunks": int(ids.shape[0]), "tokens": int(mask.sum()), "out": args.out})


def cmd_filter(args) -> None:
    pairs = load_pairs(args.input)
    tok = Tokenizer.load(args.vocab)
    embed = _embedder(args.embedder, tok, [p.document for p in pairs])
    if args.mode == "topk":
        kept, stats = consistency_filter_topk(pairs, embed, k=args.k, sample_size=args.sample_size,
                                              rng_seed=args.seed, return_stats=True)
    else:
        if args.threshold is None:
            raise ValueError("--mode threshold needs --threshold")
        kept, stats = consistency_filter_threshold(pairs, embed, args.threshold, return_stats=True)
    save_pairs(args.out, kept)
    _emit({"input": len(pairs), "kept": len(kept), "per_source": stats, "out": args.out})


def cmd_mine(args) -> None:
    pairs = load_pairs(args.input)
    corpus = _texts(args.corpus) if args.corpus else list(dict.fromkeys(p.document for p in pairs))
    tok = Tokenizer.load(args.vocab)
    mined = mine_hard_negatives(pairs, corpus, _embedder(args.embedder, tok, corpus), top=args.top)
    save_pairs(args.out, mined)
    _emit({"pairs": len(mined), "min_negatives": min((len(p.hard_negatives) for p in mined), default=0),
           "out": args.out})


def cmd_train(args) -> None:
    stage = Stage.parse(args.stage)
    plan = load_plan(stage, args.config, _parse_sets(args.set), profile=args.profile)
    tok = Tokenizer.load(args.vocab)
    if args.init:
        encoder, _ = load_checkpoint(args.init)
    else:
        model = {}
        if args.config:
            with open(args.config, "rb") as fh:
                model = tomllib.load(fh).get("model", {})
        model.setdefault("vocab_size", tok.padded_vocab_size)
        encoder = Encoder(EncoderConfig(**model), seed=args.seed)
    if stage is Stage.MLM:
        packed = np.load(args.data)
        data = MlmData(packed["ids"], packed["mask"], tok)
    else:
        kinds = {name: kind for name, (_, kind) in SOURCES.items()}
        data = ContrastiveData(group_by_source(load_pairs(args.data)), tok, kinds)
    res = run_stage(plan, encoder, data, rng_seed=args.seed, out_dir=args.out, metrics_path=args.metrics)
    last = res.metrics[-1]["loss"] if res.metrics else None
    _emit({"stage": stage.value, "steps": res.steps, "final_loss": last, "checkpoint": str(res.checkpoint)})


def cmd_embed(args) -> None:
    encoder, _ = load_checkpoint(args.checkpoint)
    tok = Tokenizer.load(args.vocab)
    texts = _texts(args.input)
    policy = RopePolicy.parse(args.policy) if args.policy else None
    emb = embed_corpus(encoder, tok, texts, TaskKind(args.task), args.max_tokens, policy)
    np.save(args.out, emb)
    _emit({"rows": int(emb.shape[0]), "dim": int(emb.shape[1]), "out": args.out})


def cmd_eval_retrieval(args) -> None:
    encoder, _ = load_checkpoint(args.checkpoint)
    tok = Tokenizer.load(args.vocab)
    task = RetrievalTask.load(args.queries, args.corpus, args.qrels)
    policy = RopePolicy.parse(args.policy) if args.policy else None
    report = retrieval_eval(encoder, tok, task, k=args.k, policy=policy, max_tokens=args.max_tokens)
    _emit(report.to_dict())


def cmd_sweep(args) -> None:
    encoder, _ = load_checkpoint(args.checkpoint)
    tok = Tokenizer.load(args.vocab)
    task = RetrievalTask.load(args.queries, args.corpus, args.qrels)
    lengths = [int(x) for x in args.lengths.split(",")]
    policies = [RopePolicy.parse(p) for p in args.policies.split(",")]
    cells = extrapolation_sweep(encoder, tok, lengths, policies, task, k=args.k)
    if args.out:
        write_sweep(args.out, cells)
    for c in cells:
        print(c.to_json())


def cmd_desk_run(args) -> None:
    from .recipe import DeskRecipe, run_desk_recipe

    result = run_desk_recipe(DeskRecipe(seed=args.seed), out_dir=args.out)
    _emit({"ndcg_at_10": result.ndcg, "random_baseline": result.random_baseline,
           "seconds": {k: round(v, 1) for k, v in result.timings.items()}})


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="desk-embed", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic pair corpus and held-out task")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=5000)
    p.add_argument("--heldout", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-vocab", help="build a word-level vocabulary from JSONL files")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-size", type=int)
    p.add_argument("--min-freq", type=int, default=1)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("pack", help="tokenize documents and pack them into fixed-width chunks (.npz)")
    p.add_argument("--input", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--chunk", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("filter", help="consistency-filter a pair file")
    p.add_argument("--input", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("topk", "threshold"), default="topk")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--sample-size", type=int, default=10_000)
    p.add_argument("--threshold", type=float)
    p.add_argument("--embedder", default="bow", help="'bow' or a checkpoint directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("mine", help="attach mined hard negatives to each pair")
    p.add_argument("--input", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", help="JSONL of documents (default: the pairs' documents)")
    p.add_argument("--top", type=int, default=20)
    p.add_argument("--embedder", default="bow")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True, choices=("mlm", "pretrain", "contrastive_pretrain", "finetune"))
    p.add_argument("--data", required=True, help="packed .npz for mlm, pair JSONL otherwise")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--init", help="checkpoint to start from (default: fresh weights)")
    p.add_argument("--config", help="TOML file with [model] and per-stage tables")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a plan field")
    p.add_argument("--profile", choices=("desk", "published"), default="desk")
    p.add_argument("--metrics", help="append per-step JSON lines here")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed texts to a .npy matrix")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", required=True, choices=[t.value for t in TaskKind])
    p.add_argument("--max-tokens", type=int, default=EVAL_MAX_TOKENS)
    p.add_argument("--policy")
    p.set_defaults(func=cmd_embed)

    evals = (
        ("eval-retrieval", cmd_eval_retrieval, "NDCG@k of a checkpoint on a retrieval task"),
        ("sweep-extrapolation", cmd_sweep, "NDCG@k per (length, RoPE policy) cell"),
    )
    for name, func, text in evals:
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--vocab", required=True)
        p.add_argument("--queries", required=True)
        p.add_argument("--corpus", required=True)
        p.add_argument("--qrels", required=True)
        p.add_argument("--k", type=int, default=10)
        p.set_defaults(func=func)
    sub.choices["eval-retrieval"].add_argument("--policy")
    sub.choices["eval-retrieval"].add_argument("--max-tokens", type=int, default=EVAL_MAX_TOKENS)
    sub.choices["sweep-extrapolation"].add_argument("--lengths", default="128,256,512")
    sub.choices["sweep-extrapolation"].add_argument(
        "--policies", default="none,position_interpolation,ntk_aware,dynamic_ntk:2")
    sub.choices["sweep-extrapolation"].add_argument("--out")

    p = sub.add_parser("desk-run", help="run the full three-stage recipe on a synthetic corpus")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_desk_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except Exception as exc:  # one machine-readable line, never a traceback
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
