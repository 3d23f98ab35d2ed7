"""Corpus curation: packing, consistency filtering, negative mining, batching, prefixes."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import replace
from typing import Callable, Iterator, Sequence

import numpy as np

from ..encoder import TaskKind
from .pairs import TextPair

logger = logging.getLogger(__name__)

EmbedFn = Callable[[Sequence[str]], np.ndarray]


# -- packing ----------------------------------------------------------------

def pack_documents(docs: Sequence[Sequence[int]], chunk: int, pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate documents into fixed-width chunks.

    Short documents are followed by the next one inside the same chunk; long
    ones spill over into the following chunks.  Only the last chunk can be
    partial, in which case it is right-padded and its mask is zero there.
    Returns ``(ids, mask)``, both ``[num_chunks, chunk]``.
    """
    if chunk < 2:
        raise ValueError("chunk must be >= 2")
    if not docs:
        raise ValueError("no documents to pack")
    stream = np.fromiter((t for d in docs for t in d), dtype=np.int64)
    n_chunks = max(1, -(-stream.size // chunk))
    ids = np.full(n_chunks * chunk, pad_id, dtype=np.int64)
    mask = np.zeros(n_chunks * chunk, dtype=np.int64)
    ids[: stream.size] = stream
    mask[: stream.size] = 1
    return ids.reshape(n_chunks, chunk), mask.reshape(n_chunks, chunk)


# -- similarity helpers -----------------------------------------------------

def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding")
    return x / norms


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _unit_rows(a) @ _unit_rows(b).T


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine of two equally shaped matrices."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    if np.any(denom == 0):
        raise ValueError("zero-norm embedding")
    return (a * b).sum(axis=1) / denom


def rank_by_similarity(sims: np.ndarray) -> np.ndarray:
    """Indices sorted by descending similarity; ties go to the lower index."""
    return np.lexsort((np.arange(sims.size), -sims))


# -- consistency filtering --------------------------------------------------

_ROW_BLOCK = 512


def topk_keep_mask(query_emb: np.ndarray, doc_emb: np.ndarray, sample: np.ndarray, k: int) -> np.ndarray:
    """For each pair i, whether document i ranks within the top ``k`` of the sampled documents.

    Pairs outside the sample compete against the sample plus their own document.
    Ties are broken toward the lower pair index.
    """
    n = query_emb.shape[0]
    q = _unit_rows(query_emb)
    d = _unit_rows(doc_emb)
    keep = np.empty(n, dtype=bool)
    for start in range(0, n, _ROW_BLOCK):
        rows = np.arange(start, min(start + _ROW_BLOCK, n))
        # one product for both sides so duplicate documents tie exactly
        full = q[rows] @ d.T
        sims = full[:, sample]
        o = full[np.arange(rows.size), rows][:, None]
        beats = (sims > o) | ((sims == o) & (sample[None, :] < rows[:, None]))
        beats &= sample[None, :] != rows[:, None]
        keep[rows] = beats.sum(axis=1) < k
    return keep


def consistency_filter_topk(
    pairs: Sequence[TextPair],
    embed_fn: EmbedFn,
    k: int = 2,
    sample_size: int = 10_000,
    rng_seed: int = 0,
    return_stats: bool = False,
):
    """Drop pairs whose document is not among the query's ``k`` nearest sampled documents."""
    if not pairs:
        raise ValueError("no pairs to filter")
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(pairs)
    sample_size = min(sample_size, n)
    rng = np.random.default_rng(rng_seed)
    sample = np.sort(rng.choice(n, size=sample_size, replace=False))
    q = np.asarray(embed_fn([p.query for p in pairs]))
    d = np.asarray(embed_fn([p.document for p in pairs]))
    keep = topk_keep_mask(q, d, sample, k)
    kept = [p for p, flag in zip(pairs, keep) if flag]
    if return_stats:
        return kept, filter_stats(pairs, keep)
    return kept


def consistency_filter_threshold(pairs: Sequence[TextPair], embed_fn: EmbedFn, threshold: float,
                                 return_stats: bool = False):
    """Keep pairs whose query/document cosine is at least ``threshold``."""
    if not -1.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [-1, 1]")
    if not pairs:
        return ([], {}) if return_stats else []
    sims = cosine_rows(embed_fn([p.query for p in pairs]), embed_fn([p.document for p in pairs]))
    keep = sims >= threshold
    kept = [p for p, flag in zip(pairs, keep) if flag]
    if return_stats:
        return kept, filter_stats(pairs, keep)
    return kept


def filter_stats(pairs: Sequence[TextPair], keep) -> dict[str, dict[str, int]]:
    stats: dict[str, dict[str, int]] = {}
    for p, flag in zip(pairs, keep):
        s = stats.setdefault(p.source, {"kept": 0, "discarded": 0})
        s["kept" if flag else "discarded"] += 1
    return stats


# -- negatives --------------------------------------------------------------

def mine_hard_negatives(pairs: Sequence[TextPair], corpus: Sequence[str], embed_fn: EmbedFn,
                        top: int = 20) -> list[TextPair]:
    """Attach the ``top`` corpus documents most similar to each query, excluding its positive."""
    if not corpus:
        raise ValueError("empty corpus")
    if top < 1:
        raise ValueError("top must be >= 1")
    if not pairs:
        return []
    corpus = list(corpus)
    present = set(corpus)
    for p in pairs:
        if p.document not in present:
            raise ValueError(f"positive document missing from corpus: {p.document[:60]!r}")
    q = _unit_rows(embed_fn([p.query for p in pairs]))
    c = _unit_rows(embed_fn(corpus))
    out = []
    for i, p in enumerate(pairs):
        row = c @ q[i]
        negs = []
        for j in rank_by_similarity(row):
            if corpus[j] == p.document:
                continue
            negs.append(corpus[j])
            if len(negs) == top:
                break
        out.append(replace(p, hard_negatives=negs))
    return out


def sample_negatives(mined: Sequence, H: int, rng_seed=0) -> list:
    """Uniform sample of ``min(H, len(mined))`` items without replacement."""
    if H < 0:
        raise ValueError("H must be >= 0")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    take = min(H, len(mined))
    if take == 0:
        return []
    return [mined[i] for i in rng.choice(len(mined), size=take, replace=False)]


def random_negatives(pairs: Sequence[TextPair], corpus: Sequence[str], H: int, rng_seed: int = 0) -> list[TextPair]:
    """In-corpus random negatives, for sources where mining does not help."""
    rng = np.random.default_rng(rng_seed)
    out = []
    for p in pairs:
        pool = [c for c in corpus if c != p.document]
        out.append(replace(p, hard_negatives=sample_negatives(pool, H, rng)))
    return out


# -- batching ---------------------------------------------------------------

def make_batches_single_source(
    datasets: dict[str, Sequence[TextPair]],
    batch_size: int,
    rng_seed: int = 0,
) -> Iterator[list[TextPair]]:
    """One epoch of batches, each drawn entirely from one source.

    Every source is shuffled and cut into full batches (the remainder is
    dropped).  The next source is picked with probability proportional to
    its number of batches not yet emitted.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(rng_seed)
    queues: dict[str, list[list[TextPair]]] = {}
    for name in sorted(datasets):
        items = list(datasets[name])
        full = len(items) // batch_size
        if full == 0:
            logger.warning("source %r has %d pairs (< batch size %d); it contributes no batches",
                           name, len(items), batch_size)
            continue
        order = rng.permutation(len(items))
        queues[name] = [[items[i] for i in order[b * batch_size:(b + 1) * batch_size]] for b in range(full)]
    names = list(queues)
    remaining = np.array([len(queues[n]) for n in names], dtype=np.float64)
    cursor = dict.fromkeys(names, 0)
    while remaining.sum() > 0:
        pick = names[rng.choice(len(names), p=remaining / remaining.sum())]
        yield queues[pick][cursor[pick]]
        cursor[pick] += 1
        remaining[names.index(pick)] -= 1


def count_single_source_batches(datasets: dict[str, Sequence], batch_size: int) -> Counter:
    return Counter({name: len(items) // batch_size for name, items in datasets.items() if len(items) >= batch_size})


# -- prefixes ---------------------------------------------------------------

PREFIX_SEPARATOR = ": "
SYMMETRIC_TASKS = (TaskKind.CLASSIFICATION, TaskKind.CLUSTERING)


def apply_prefix(task: TaskKind | str, text: str) -> str:
    if not text:
        raise ValueError("cannot prefix empty text")
    return f"{TaskKind(task).value}{PREFIX_SEPARATOR}{text}"


def prefix_sides(kind: str) -> tuple[TaskKind, TaskKind]:
    """(query-side, document-side) prefixes for a source's task kind.

    ``retrieval`` is asymmetric; ``classification`` and ``clustering`` put
    the same prefix on both sides.
    """
    if kind == "retrieval":
        return TaskKind.SEARCH_QUERY, TaskKind.SEARCH_DOCUMENT
    task = TaskKind(kind)
    if task not in SYMMETRIC_TASKS:
        raise ValueError(f"{kind!r} is not a pair-level task kind")
    return task, task


def prefix_pair(pair: TextPair, kind: str) -> TextPair:
    q_task, d_task = prefix_sides(kind)
    negs = None
    if pair.hard_negatives is not None:
        negs = [apply_prefix(d_task, t) for t in pair.hard_negatives]
    return TextPair(apply_prefix(q_task, pair.query), apply_prefix(d_task, pair.document), pair.source, negs)
