"""Embedding texts with evaluation conventions, and exhaustive-search retrieval scoring."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..autodiff import no_grad
from ..data.curation import apply_prefix
from ..data.pairs import read_jsonl, write_jsonl
from ..data.tokenizer import Tokenizer
from ..encoder import Encoder, TaskKind, TokenBatch, finalize_embedding
from ..rope import DEFAULT_ALPHA, PolicyKind, RopePolicy
from .metrics import ndcg_at_k, random_ndcg_expectation

EVAL_MAX_TOKENS = 512


@dataclass
class RetrievalTask:
    queries: dict[str, str]
    corpus: dict[str, str]
    qrels: dict[str, dict[str, float]]

    def __post_init__(self):
        for qid, rels in self.qrels.items():
            for doc_id, grade in rels.items():
                if doc_id not in self.corpus:
                    raise ValueError(f"qrel for query {qid!r} names unknown document {doc_id!r}")
                if grade < 0:
                    raise ValueError(f"negative relevance grade for ({qid!r}, {doc_id!r})")

    @classmethod
    def from_pairs(cls, pairs, prefix: str = "") -> "RetrievalTask":
        """One query per pair, relevant to its own document (grade 1)."""
        queries, corpus, qrels = {}, {}, {}
        for i, p in enumerate(pairs):
            qid, did = f"{prefix}q{i:06d}", f"{prefix}d{i:06d}"
            queries[qid] = p.query
            corpus[did] = p.document
            qrels[qid] = {did: 1.0}
        return cls(queries, corpus, qrels)

    @classmethod
    def load(cls, queries_path, corpus_path, qrels_path) -> "RetrievalTask":
        queries = {str(o["id"]): o["text"] for o in read_jsonl(queries_path)}
        corpus = {str(o["id"]): o["text"] for o in read_jsonl(corpus_path)}
        qrels: dict[str, dict[str, float]] = defaultdict(dict)
        for o in read_jsonl(qrels_path):
            qrels[str(o["query_id"])][str(o["doc_id"])] = float(o.get("relevance", 1))
        return cls(queries, corpus, dict(qrels))

    def save(self, queries_path, corpus_path, qrels_path) -> None:
        write_jsonl(queries_path, ({"id": k, "text": v} for k, v in self.queries.items()))
        write_jsonl(corpus_path, ({"id": k, "text": v} for k, v in self.corpus.items()))
        write_jsonl(qrels_path, ({"query_id": q, "doc_id": d, "relevance": r}
                                 for q, rels in self.qrels.items() for d, r in rels.items()))


def _resolve_policy(encoder: Encoder, policy: RopePolicy | None, longest: int) -> RopePolicy:
    policy = policy or RopePolicy.none()
    if policy.kind is PolicyKind.NONE and longest > encoder.config.trained_context:
        return RopePolicy.dynamic(DEFAULT_ALPHA)
    return policy


def embed_corpus(
    encoder: Encoder,
    tokenizer: Tokenizer,
    texts: Sequence[str],
    task_kind: TaskKind | str,
    max_tokens: int = EVAL_MAX_TOKENS,
    policy: RopePolicy | None = None,
    batch_size: int = 64,
    prefix: bool = True,
    trace: list | None = None,
) -> np.ndarray:
    """Embed ``texts`` for ``task_kind``: prefix, truncate, encode, pool, normalize.

    Texts are batched by exact token length so no padding is needed and each
    embedding depends only on its own text.  When a text exceeds the trained
    context and no policy is given, Dynamic-NTK (alpha 2) takes over.
    """
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    task_kind = TaskKind(task_kind)
    seqs = [
        tokenizer.encode(apply_prefix(task_kind, t) if prefix else t, add_special=True, max_tokens=max_tokens)
        for t in texts
    ]
    if not seqs:
        return np.zeros((0, encoder.config.hidden_dim))
    policy = _resolve_policy(encoder, policy, max(len(s) for s in seqs))
    by_len: dict[int, list[int]] = defaultdict(list)
    for i, s in enumerate(seqs):
        by_len[len(s)].append(i)
    out = np.empty((len(seqs), encoder.config.hidden_dim))
    with no_grad():
        for length in sorted(by_len):
            idx = by_len[length]
            for s in range(0, len(idx), batch_size):
                rows = idx[s:s + batch_size]
                batch = TokenBatch(np.array([seqs[i] for i in rows]), np.ones((len(rows), length)))
                info: dict = {}
                out[rows] = encoder.embed(batch, policy, info).data
                if trace is not None:
                    trace.append({"length": length, **info})
    return finalize_embedding(out, task_kind)


def _id_rank(doc_ids: Sequence[str]) -> np.ndarray:
    return np.argsort(np.argsort(np.asarray(doc_ids, dtype=object), kind="stable"), kind="stable")


def rank_documents(scores: np.ndarray, doc_ids: Sequence[str], id_rank: np.ndarray | None = None) -> list[str]:
    """Doc ids by descending score; equal scores fall back to ascending doc id."""
    id_rank = _id_rank(doc_ids) if id_rank is None else id_rank
    order = np.lexsort((id_rank, -np.asarray(scores)))
    return [doc_ids[i] for i in order]


@dataclass
class RetrievalReport:
    mean_ndcg: float
    per_query: dict[str, float]
    skipped: list[str] = field(default_factory=list)
    random_baseline: float = 0.0
    k: int = 10

    def to_dict(self) -> dict:
        return {"k": self.k, "mean_ndcg": self.mean_ndcg, "random_baseline": self.random_baseline,
                "evaluated": len(self.per_query), "skipped": len(self.skipped)}


def score_rankings(query_emb: np.ndarray, doc_emb: np.ndarray, task: RetrievalTask, k: int = 10) -> RetrievalReport:
    qids = list(task.queries)
    dids = list(task.corpus)
    scores = query_emb @ doc_emb.T
    id_rank = _id_rank(dids)
    per_query, skipped, baselines = {}, [], []
    for qi, qid in enumerate(qids):
        rels = task.qrels.get(qid, {})
        ranking = rank_documents(scores[qi], dids, id_rank)[:k]
        value = ndcg_at_k(ranking, rels, k)
        if value is None:
            skipped.append(qid)
            continue
        per_query[qid] = value
        baselines.append(random_ndcg_expectation(rels, len(dids), k))
    if not per_query:
        raise ValueError("no query has a relevant document")
    mean = float(np.mean([per_query[q] for q in qids if q in per_query]))
    return RetrievalReport(mean, per_query, skipped, float(np.mean(baselines)), k)


def retrieval_eval(
    encoder: Encoder,
    tokenizer: Tokenizer,
    task: RetrievalTask,
    k: int = 10,
    policy: RopePolicy | None = None,
    max_tokens: int = EVAL_MAX_TOKENS,
    batch_size: int = 64,
) -> RetrievalReport:
    """Mean NDCG@k of exact cosine search over ``task``'s corpus."""
    if not task.queries or not task.corpus:
        raise ValueError("empty retrieval task")
    q = embed_corpus(encoder, tokenizer, list(task.queries.values()), TaskKind.SEARCH_QUERY,
                     max_tokens, policy, batch_size)
    d = embed_corpus(encoder, tokenizer, list(task.corpus.values()), TaskKind.SEARCH_DOCUMENT,
                     max_tokens, policy, batch_size)
    return score_rankings(q, d, task, k)
