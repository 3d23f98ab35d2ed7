"""Long-context probe: needle retrieval scored across lengths and RoPE policies."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..data.synthetic import SyntheticWorld
from ..data.tokenizer import Tokenizer
from ..encoder import Encoder, TaskKind
from ..rope import PolicyKind, RopePolicy, effective_rope
from .retrieval import RetrievalTask, embed_corpus, score_rankings

SWEEP_FIELDS = ("length", "policy", "alpha", "rope_base", "ndcg_at_10", "random_baseline")


def make_needle_task(world: SyntheticWorld, n_docs: int, doc_words: int, tail_fraction: float = 0.1) -> RetrievalTask:
    """Documents of ``doc_words`` background words whose identifying span sits in the last ``tail_fraction``."""
    queries, corpus, qrels = {}, {}, {}
    for i in range(n_docs):
        e = world.entity()
        qid, did = f"nq{i:05d}", f"nd{i:05d}"
        queries[qid] = world.query(e, "question")
        corpus[did] = world.needle_document(e, doc_words, tail_fraction)
        qrels[qid] = {did: 1.0}
    return RetrievalTask(queries, corpus, qrels)


def policy_at_length(policy: RopePolicy, length: int, trained_context: int) -> RopePolicy:
    """Bind a static policy's target window to the evaluation length.

    Position interpolation and NTK-aware scaling stretch to ``max(L, length)``,
    so at or below the trained context they reduce to plain RoPE.
    """
    if policy.kind in (PolicyKind.POSITION_INTERPOLATION, PolicyKind.NTK_AWARE):
        return RopePolicy(policy.kind, policy.alpha, max(trained_context, length))
    return policy


@dataclass
class SweepCell:
    length: int
    policy: str
    alpha: float | None
    rope_base: float
    ndcg_at_10: float
    random_baseline: float

    def to_json(self) -> str:
        return json.dumps({f: getattr(self, f) for f in SWEEP_FIELDS})


def extrapolation_sweep(
    encoder: Encoder,
    tokenizer: Tokenizer,
    lengths: Sequence[int],
    policies: Sequence[RopePolicy],
    probe_task: RetrievalTask,
    k: int = 10,
) -> list[SweepCell]:
    """Score ``probe_task`` with documents truncated to each length, under each policy.

    Queries stay short; only document length varies.  ``none`` is only
    evaluated where the length fits in the trained context.
    """
    lengths = list(lengths)
    if lengths != sorted(lengths):
        raise ValueError("lengths must be sorted ascending")
    L = encoder.config.trained_context
    cfg = encoder.config.rope
    cells: list[SweepCell] = []
    query_cache: dict[str, np.ndarray] = {}
    docs = list(probe_task.corpus.values())
    for length in lengths:
        for base_policy in policies:
            if base_policy.kind is PolicyKind.NONE and length > L:
                continue
            policy = policy_at_length(base_policy, length, L)
            label = policy.label()
            if label not in query_cache:
                query_cache[label] = embed_corpus(encoder, tokenizer, list(probe_task.queries.values()),
                                                  TaskKind.SEARCH_QUERY, L, policy)
            d = embed_corpus(encoder, tokenizer, docs, TaskKind.SEARCH_DOCUMENT, length, policy)
            report = score_rankings(query_cache[label], d, probe_task, k)
            base, _ = effective_rope(cfg, policy, length)
            alpha = policy.alpha if policy.kind is PolicyKind.DYNAMIC_NTK else None
            cells.append(SweepCell(length, label, alpha, base, report.mean_ndcg, report.random_baseline))
    return cells


def write_sweep(path, cells: Sequence[SweepCell]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in cells:
            fh.write(c.to_json() + "\n")
