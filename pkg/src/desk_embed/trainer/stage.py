"""Running one training stage end to end."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from ..autodiff import NonFiniteError, Tensor
from ..data.curation import make_batches_single_source, prefix_sides, apply_prefix, sample_negatives
from ..data.pairs import TextPair
from ..data.tokenizer import Tokenizer
from ..encoder import Encoder, TokenBatch
from ..objectives import (
    RawContrastiveBatch,
    gradcache_grads,
    mlm_loss,
    mlm_mask,
    monolithic_grads,
)
from .checkpoint import save_checkpoint
from .optim import OptimizerState, adamw_step
from .plans import Stage, TrainPlan, lr_at

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Path | None):
        where = f"; last good weights at {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite loss at step {step}{where}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class MlmData:
    ids: np.ndarray
    mask: np.ndarray
    tokenizer: Tokenizer


@dataclass
class ContrastiveData:
    datasets: dict[str, list[TextPair]]
    tokenizer: Tokenizer
    source_kinds: dict[str, str] = field(default_factory=dict)

    def kind(self, source: str) -> str:
        return self.source_kinds.get(source, "retrieval")


@dataclass
class StageResult:
    encoder: Encoder
    metrics: list[dict]
    steps: int
    checkpoint: Path | None = None


def tokenize_texts(tokenizer: Tokenizer, texts: Sequence[str], max_tokens: int) -> TokenBatch:
    seqs = [tokenizer.encode(t, add_special=True, max_tokens=max_tokens) for t in texts]
    return TokenBatch.from_sequences(seqs, pad_id=tokenizer.pad_id)


def collate_pairs(pairs: Sequence[TextPair], data: ContrastiveData, max_seq: int, num_hard: int,
                  rng: np.random.Generator) -> RawContrastiveBatch:
    """Prefix and tokenize one single-source batch; samples ``num_hard`` negatives per pair."""
    tok = data.tokenizer
    q_task, d_task = prefix_sides(data.kind(pairs[0].source))
    queries = tokenize_texts(tok, [apply_prefix(q_task, p.query) for p in pairs], max_seq)
    docs = tokenize_texts(tok, [apply_prefix(d_task, p.document) for p in pairs], max_seq)
    negatives = None
    if num_hard:
        flat = []
        for p in pairs:
            mined = p.hard_negatives or []
            if len(mined) < num_hard:
                raise ValueError(f"pair needs {num_hard} hard negatives, has {len(mined)}")
            chosen = sample_negatives(mined, num_hard, rng)
            flat += [apply_prefix(d_task, t) for t in chosen]
        negatives = tokenize_texts(tok, flat, max_seq)
    return RawContrastiveBatch(queries, docs, negatives, num_hard)


def _mlm_steps(plan: TrainPlan, data: MlmData) -> int:
    return max(1, data.ids.shape[0] // plan.batch_size)


def _contrastive_steps(plan: TrainPlan, data: ContrastiveData) -> int:
    return sum(len(v) // plan.batch_size for v in data.datasets.values())


def _mlm_batches(plan: TrainPlan, data: MlmData, seed: int) -> Iterator[np.ndarray]:
    epoch = 0
    while True:
        order = np.random.default_rng([seed, epoch]).permutation(data.ids.shape[0])
        for b in range(_mlm_steps(plan, data)):
            yield order[b * plan.batch_size:(b + 1) * plan.batch_size]
        epoch += 1


def _pair_batches(plan: TrainPlan, data: ContrastiveData, seed: int) -> Iterator[list[TextPair]]:
    epoch = 0
    while True:
        yield from make_batches_single_source(data.datasets, plan.batch_size, rng_seed=seed * 100_003 + epoch)
        epoch += 1


def _snapshot(encoder: Encoder) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in encoder.weights.items()}


def run_stage(
    plan: TrainPlan,
    encoder: Encoder,
    data: MlmData | ContrastiveData,
    rng_seed: int = 0,
    out_dir=None,
    metrics_path=None,
    on_step: Callable[[dict], None] | None = None,
) -> StageResult:
    """Train ``encoder`` in place for one stage and optionally checkpoint it.

    The number of optimizer steps is ``plan.max_steps`` when set, otherwise
    ``plan.epochs`` passes over the data.  A non-finite loss stops the run;
    the weights from the last finite step are written to ``out_dir`` first.
    """
    is_mlm = plan.stage is Stage.MLM
    if is_mlm != isinstance(data, MlmData):
        raise TypeError(f"stage {plan.stage.value} cannot train on {type(data).__name__}")
    if plan.stage is Stage.FINETUNE and plan.hard_negatives < 1:
        raise ValueError("finetune stage requires hard_negatives >= 1")
    per_epoch = _mlm_steps(plan, data) if is_mlm else _contrastive_steps(plan, data)
    if per_epoch == 0:
        raise ValueError("no full batch available for this stage")
    total = plan.max_steps if plan.max_steps is not None else plan.epochs * per_epoch

    rng = np.random.default_rng(rng_seed)
    state = OptimizerState(lr=plan.lr, beta1=plan.beta1, beta2=plan.beta2, eps=plan.eps,
                           weight_decay=plan.weight_decay, grad_clip=plan.grad_clip)
    batches = _mlm_batches(plan, data, rng_seed) if is_mlm else _pair_batches(plan, data, rng_seed)
    metrics: list[dict] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    last_good = _snapshot(encoder)
    start = time.perf_counter()
    try:
        for step in range(total):
            t0 = time.perf_counter()
            before = _snapshot(encoder)
            try:
                if is_mlm:
                    loss, grads, ntok = _mlm_step(plan, encoder, data, next(batches), rng)
                else:
                    loss, grads, ntok = _contrastive_step(plan, encoder, data, next(batches), rng)
                if not np.isfinite(loss):
                    raise NonFiniteError("loss is not finite")
            except (NonFiniteError, FloatingPointError):
                ckpt = None
                if out_dir is not None:
                    for k, arr in last_good.items():
                        encoder.weights[k].data = arr
                    ckpt = save_checkpoint(out_dir, encoder, {"stage": plan.stage.value, "step": step, "diverged": True})
                raise TrainingDiverged(step, ckpt) from None
            last_good = before
            lr = lr_at(plan, step, total)
            gnorm = adamw_step(state, encoder.weights, grads, lr=lr)
            dt = time.perf_counter() - t0
            row = {
                "stage": plan.stage.value,
                "step": step,
                "lr": lr,
                "loss": loss,
                "grad_norm": gnorm,
                "tokens_per_sec": ntok / dt if dt > 0 else 0.0,
                "wall_clock": time.perf_counter() - start,
            }
            metrics.append(row)
            if log_fh and step % plan.log_every == 0:
                log_fh.write(json.dumps(row) + "\n")
            if on_step:
                on_step(row)
    finally:
        if log_fh:
            log_fh.close()
        encoder.zero_grad()
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(out_dir, encoder, {"stage": plan.stage.value, "steps": total, "plan": plan.to_dict()})
    return StageResult(encoder, metrics, total, ckpt)


def _mlm_step(plan: TrainPlan, encoder: Encoder, data: MlmData, rows: np.ndarray, rng):
    tok = data.tokenizer
    micro = np.array_split(rows, min(plan.accumulation_steps, len(rows)))
    total_labels = 0
    masked = []
    for idx in micro:
        mb = mlm_mask(data.ids[idx], plan.mask_rate, rng, mask_id=tok.mask_id,
                      special_ids=tok.special_ids, random_range=(len(tok.special_ids), tok.raw_vocab_size))
        masked.append((idx, mb))
        total_labels += mb.num_labeled
    encoder.zero_grad()
    loss_sum = 0.0
    ntok = 0
    for idx, mb in masked:
        batch = TokenBatch(mb.input_ids, data.mask[idx])
        hidden = encoder.forward(batch)
        flat_labels = mb.labels.reshape(-1)
        pos = np.nonzero(flat_labels != -100)[0]
        loss = mlm_loss(encoder.mlm_logits(hidden, pos), flat_labels[pos])
        # weight each micro-batch by its share of labeled tokens so the sum is the global mean
        weight = pos.size / total_labels
        (loss * weight).backward()
        loss_sum += loss.item() * weight
        ntok += int(batch.attention_mask.sum())
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in encoder.weights.items()}
    return loss_sum, grads, ntok


def _contrastive_step(plan: TrainPlan, encoder: Encoder, data: ContrastiveData, pairs: list[TextPair], rng):
    raw = collate_pairs(pairs, data, plan.max_seq, plan.hard_negatives, rng)
    if plan.gradcache_chunk:
        loss, grads = gradcache_grads(encoder, raw, plan.gradcache_chunk, plan.temperature, plan.bidirectional)
    else:
        loss, grads = monolithic_grads(encoder, raw, plan.temperature, plan.bidirectional)
    return loss, grads, raw.num_tokens()
