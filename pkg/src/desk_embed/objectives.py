"""Training objectives: masked-LM, in-batch InfoNCE, hard-negative InfoNCE, GradCache."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .encoder import Encoder, TokenBatch

IGNORE_INDEX = -100
DEFAULT_MASK_RATE = 0.30
DEFAULT_TEMPERATURE = 0.05


@dataclass
class MlmBatch:
    input_ids: np.ndarray
    labels: np.ndarray
    mask_rate: float = DEFAULT_MASK_RATE

    @property
    def num_labeled(self) -> int:
        return int((self.labels != IGNORE_INDEX).sum())


def mlm_mask(
    tokens,
    rate: float = DEFAULT_MASK_RATE,
    rng_seed=0,
    *,
    mask_id: int,
    special_ids=(),
    random_range: tuple[int, int] | None = None,
) -> MlmBatch:
    """Corrupt a token matrix for masked-LM training.

    Each non-special position is selected with probability ``rate``; selected
    positions become ``mask_id`` 80% of the time, a random token from
    ``random_range`` 10% of the time, and stay unchanged otherwise.
    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    if not 0 < rate < 1:
        raise ValueError(f"mask rate must lie in (0, 1), got {rate}")
    tokens = np.asarray(tokens, dtype=np.int64)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    eligible = ~np.isin(tokens, np.asarray(list(special_ids), dtype=np.int64))
    selected = (rng.random(tokens.shape) < rate) & eligible
    if not selected.any():
        raise ValueError("mlm_mask selected no positions; the loss would be undefined")
    roll = rng.random(tokens.shape)
    lo, hi = random_range if random_range is not None else (0, int(tokens.max()) + 1)
    random_tokens = rng.integers(lo, hi, size=tokens.shape)
    corrupted = tokens.copy()
    corrupted[selected & (roll < 0.8)] = mask_id
    swap = selected & (roll >= 0.8) & (roll < 0.9)
    corrupted[swap] = random_tokens[swap]
    labels = np.where(selected, tokens, IGNORE_INDEX)
    return MlmBatch(corrupted, labels, rate)


def mlm_loss(logits, labels) -> Tensor:
    """Mean cross-entropy over labeled positions of ``logits[..., vocab]``."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    labels = np.asarray(labels).reshape(-1)
    flat = logits.reshape(-1, logits.shape[-1])
    if not (labels != IGNORE_INDEX).any():
        raise ValueError("mlm_loss: no labeled positions")
    return ad.cross_entropy(flat, labels, IGNORE_INDEX)


def _check_nonzero(*arrays: np.ndarray) -> None:
    for a in arrays:
        if a is not None and np.any((a * a).sum(axis=-1) == 0.0):
            raise ValueError("zero-norm embedding in contrastive batch")


@dataclass
class ContrastiveBatch:
    query_emb: Tensor
    doc_emb: Tensor
    hard_neg_emb: Tensor | None = None
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        self.query_emb = _wrap(self.query_emb)
        self.doc_emb = _wrap(self.doc_emb)
        if self.hard_neg_emb is not None:
            self.hard_neg_emb = _wrap(self.hard_neg_emb)
        n = self.query_emb.shape[0]
        if n < 1 or self.doc_emb.shape != self.query_emb.shape:
            raise ad.ShapeError(f"query {self.query_emb.shape} and document {self.doc_emb.shape} embeddings must match")
        if self.hard_neg_emb is not None:
            hn = self.hard_neg_emb.shape
            if len(hn) != 3 or hn[0] != n or hn[2] != self.query_emb.shape[1]:
                raise ad.ShapeError(f"hard negatives must be [n, H, d], got {hn}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @property
    def num_hard(self) -> int:
        return 0 if self.hard_neg_emb is None else self.hard_neg_emb.shape[1]


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _contrastive_logits(batch: ContrastiveBatch) -> Tensor:
    _check_nonzero(batch.query_emb.data, batch.doc_emb.data,
                   None if batch.hard_neg_emb is None else batch.hard_neg_emb.data)
    q = ad.l2_normalize(batch.query_emb)
    d = ad.l2_normalize(batch.doc_emb)
    logits = (q @ d.transpose(1, 0)) * (1.0 / batch.temperature)
    if batch.num_hard:
        n, H, dim = batch.hard_neg_emb.shape
        hn = ad.l2_normalize(batch.hard_neg_emb)
        # each query only sees its own row of hard negatives
        hard = (hn @ q.reshape(n, dim, 1)).reshape(n, H) * (1.0 / batch.temperature)
        logits = ad.concat([logits, hard], axis=1)
    return logits


def info_nce(batch: ContrastiveBatch, bidirectional: bool = False) -> Tensor:
    """Query-to-document InfoNCE with cosine scores over in-batch negatives."""
    if batch.num_hard:
        raise ValueError("info_nce takes no hard negatives; use info_nce_hard")
    logits = _contrastive_logits(batch)
    targets = np.arange(batch.query_emb.shape[0])
    loss = ad.cross_entropy(logits, targets)
    if bidirectional:
        loss = (loss + ad.cross_entropy(logits.transpose(1, 0), targets)) * 0.5
    return loss


def info_nce_hard(batch: ContrastiveBatch) -> Tensor:
    """InfoNCE whose partition also includes each query's own hard negatives."""
    logits = _contrastive_logits(batch)
    return ad.cross_entropy(logits, np.arange(batch.query_emb.shape[0]))


def contrastive_loss(q, d, hn=None, temperature: float = DEFAULT_TEMPERATURE, bidirectional: bool = False) -> Tensor:
    batch = ContrastiveBatch(q, d, hn, temperature)
    if batch.num_hard:
        return info_nce_hard(batch)
    return info_nce(batch, bidirectional=bidirectional)


# -- GradCache --------------------------------------------------------------

@dataclass
class RawContrastiveBatch:
    """Tokenized queries, documents and (optionally) flattened hard negatives."""

    queries: TokenBatch
    documents: TokenBatch
    negatives: TokenBatch | None = None
    num_hard: int = 0

    @property
    def size(self) -> int:
        return self.queries.token_ids.shape[0]

    def num_tokens(self) -> int:
        total = int(self.queries.lengths.sum() + self.documents.lengths.sum())
        if self.negatives is not None:
            total += int(self.negatives.lengths.sum())
        return total


def _embed_all(encoder: Encoder, raw: RawContrastiveBatch, policy=None):
    q = encoder.embed(raw.queries, policy)
    d = encoder.embed(raw.documents, policy)
    hn = None
    if raw.negatives is not None and raw.num_hard:
        hn = encoder.embed(raw.negatives, policy).reshape(raw.size, raw.num_hard, -1)
    return q, d, hn


def monolithic_grads(encoder: Encoder, raw: RawContrastiveBatch, temperature: float = DEFAULT_TEMPERATURE,
                     bidirectional: bool = False) -> tuple[float, dict[str, np.ndarray]]:
    """Single forward/backward over the whole batch (the reference path)."""
    encoder.zero_grad()
    q, d, hn = _embed_all(encoder, raw)
    loss = contrastive_loss(q, d, hn, temperature, bidirectional)
    loss.backward()
    return loss.item(), _collect(encoder)


def _collect(encoder: Encoder) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in encoder.weights.items()}


def gradcache_grads(
    encoder: Encoder,
    raw: RawContrastiveBatch,
    chunk_size: int,
    temperature: float = DEFAULT_TEMPERATURE,
    bidirectional: bool = False,
) -> tuple[float, dict[str, np.ndarray]]:
    """Exact large-batch contrastive gradients computed chunk by chunk.

    1. embed every chunk without recording a graph;
    2. differentiate the loss with respect to the cached embeddings only;
    3. re-encode each chunk with recording on and backpropagate the cached
       embedding gradient into the parameters, accumulating across chunks.
    """
    n = raw.size
    if chunk_size < 1 or chunk_size > n or n % chunk_size:
        raise ValueError(f"chunk_size {chunk_size} must divide the batch size {n}")
    H = raw.num_hard if raw.negatives is not None else 0
    chunks = [np.arange(s, s + chunk_size) for s in range(0, n, chunk_size)]

    def neg_rows(idx):
        return (idx[:, None] * H + np.arange(H)[None, :]).reshape(-1)

    # pass 1: representations without a graph
    with no_grad():
        q_rep = np.concatenate([encoder.embed(raw.queries.rows(c)).data for c in chunks])
        d_rep = np.concatenate([encoder.embed(raw.documents.rows(c)).data for c in chunks])
        n_rep = None
        if H:
            n_rep = np.concatenate([encoder.embed(raw.negatives.rows(neg_rows(c))).data for c in chunks])

    # pass 2: loss gradient w.r.t. the cached representations
    q_leaf = Tensor(q_rep, requires_grad=True)
    d_leaf = Tensor(d_rep, requires_grad=True)
    n_leaf = Tensor(n_rep.reshape(n, H, -1), requires_grad=True) if H else None
    loss = contrastive_loss(q_leaf, d_leaf, n_leaf, temperature, bidirectional)
    loss.backward()

    # pass 3: replay each chunk and inject the cached gradient
    encoder.zero_grad()
    for c in chunks:
        ad.backward(encoder.embed(raw.queries.rows(c)), q_leaf.grad[c])
        ad.backward(encoder.embed(raw.documents.rows(c)), d_leaf.grad[c])
        if H:
            rows = neg_rows(c)
            ad.backward(encoder.embed(raw.negatives.rows(rows)), n_leaf.grad.reshape(n * H, -1)[rows])
    return loss.item(), _collect(encoder)
