"""Ranking metrics."""

from __future__ import annotations

import math
from typing import Mapping, Sequence


def _discount(rank: int) -> float:
    return 1.0 / math.log2(rank + 1)


def dcg(gains: Sequence[float]) -> float:
    return sum(g * _discount(r) for r, g in enumerate(gains, 1))


def ndcg_at_k(ranking: Sequence[str], qrels: Mapping[str, float], k: int = 10) -> float | None:
    """NDCG@k with exponential gain ``2**rel - 1``.

    Returns ``None`` when the query has no relevant document (the caller
    should skip it rather than count a zero).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ideal = sorted((r for r in qrels.values() if r > 0), reverse=True)[:k]
    if not ideal:
        return None
    gains = [2.0 ** qrels.get(doc, 0) - 1.0 for doc in ranking[:k]]
    return dcg(gains) / dcg([2.0 ** r - 1.0 for r in ideal])


def random_ndcg_expectation(qrels: Mapping[str, float], num_docs: int, k: int = 10) -> float | None:
    """Expected NDCG@k of a uniformly random ranking of ``num_docs`` documents."""
    ideal = sorted((r for r in qrels.values() if r > 0), reverse=True)[:k]
    if not ideal:
        return None
    mean_gain = sum(2.0 ** r - 1.0 for r in qrels.values() if r > 0) / num_docs
    expected = mean_gain * sum(_discount(r) for r in range(1, min(k, num_docs) + 1))
    return expected / dcg([2.0 ** r - 1.0 for r in ideal])
