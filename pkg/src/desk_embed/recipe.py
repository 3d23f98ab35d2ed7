"""The full three-stage recipe on a generated corpus, sized for a laptop CPU."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .data.curation import consistency_filter_topk, mine_hard_negatives, pack_documents
from .data.pairs import group_by_source
from .data.synthetic import SOURCES, DeskCorpus, build_desk_corpus
from .data.tokenizer import Tokenizer
from .embedders import BagOfWordsEmbedder
from .encoder import Encoder, EncoderConfig
from .eval.retrieval import RetrievalTask, retrieval_eval
from .trainer.plans import Stage, desk_plan
from .trainer.stage import ContrastiveData, MlmData, run_stage

logger = logging.getLogger(__name__)


@dataclass
class DeskRecipe:
    n_pairs: int = 5000
    heldout: int = 500
    seed: int = 0
    num_layers: int = 4
    hidden_dim: int = 128
    num_heads: int = 4
    ffn_dim: int = 256
    trained_context: int = 128
    mlm_steps: int = 500
    mlm_batch: int = 8
    mlm_lr: float = 5e-4
    pretrain_steps: int = 300
    pretrain_batch: int = 64
    pretrain_lr: float = 2e-4
    pretrain_warmup: int = 30
    finetune_steps: int = 100
    finetune_batch: int = 16
    finetune_lr: float = 2e-5
    finetune_warmup: int = 10
    hard_negatives: int = 7
    mined_negatives: int = 20
    filter_k: int = 2
    filter_sample: int = 10_000
    temperature: float = 0.05

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(num_layers=self.num_layers, hidden_dim=self.hidden_dim, num_heads=self.num_heads,
                             ffn_dim=self.ffn_dim, vocab_size=vocab_size, trained_context=self.trained_context)


@dataclass
class RecipeResult:
    corpus: DeskCorpus
    tokenizer: Tokenizer
    task: RetrievalTask
    ndcg: dict[str, float]
    random_baseline: float
    encoders: dict[str, Encoder]
    metrics: dict[str, list[dict]] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    filter_stats: dict = field(default_factory=dict)


def run_desk_recipe(recipe: DeskRecipe | None = None, out_dir=None) -> RecipeResult:
    """MLM -> filtered contrastive pretraining -> hard-negative finetuning, evaluating after each stage."""
    r = recipe or DeskRecipe()
    out = Path(out_dir) if out_dir is not None else None
    clock = time.perf_counter()
    timings: dict[str, float] = {}

    corpus = build_desk_corpus(r.n_pairs, r.heldout, seed=r.seed)
    train_texts = [t for p in corpus.pretrain + corpus.finetune for t in (p.query, p.document)]
    tokenizer = Tokenizer.build(train_texts)
    if out:
        out.mkdir(parents=True, exist_ok=True)
        tokenizer.save(out / "vocab.json")
    task = RetrievalTask.from_pairs(corpus.heldout)
    encoder = Encoder(r.encoder_config(tokenizer.padded_vocab_size), seed=r.seed)

    ndcg: dict[str, float] = {}
    encoders: dict[str, Encoder] = {}
    metrics: dict[str, list[dict]] = {}

    def evaluate(name: str, enc: Encoder) -> None:
        report = retrieval_eval(enc, tokenizer, task, k=10)
        ndcg[name] = report.mean_ndcg
        encoders[name] = enc.copy()
        nonlocal_baseline[0] = report.random_baseline
        logger.info("%s: NDCG@10 %.4f (random %.4f)", name, report.mean_ndcg, report.random_baseline)

    nonlocal_baseline = [0.0]
    evaluate("init", encoder)
    timings["setup"] = time.perf_counter() - clock

    # stage 1: masked language modeling on packed documents
    t0 = time.perf_counter()
    docs = [tokenizer.encode(d) + [tokenizer.sep_id] for d in corpus.mlm_documents]
    ids, mask = pack_documents(docs, r.trained_context, tokenizer.pad_id)
    plan = desk_plan(Stage.MLM, batch_size=r.mlm_batch, max_steps=r.mlm_steps, lr=r.mlm_lr,
                     max_seq=r.trained_context)
    res = run_stage(plan, encoder, MlmData(ids, mask, tokenizer), rng_seed=r.seed,
                    out_dir=out / "mlm" if out else None)
    metrics["mlm"] = res.metrics
    timings["mlm"] = time.perf_counter() - t0
    evaluate("mlm", encoder)

    # stage 2: consistency-filtered, single-source contrastive pretraining
    t0 = time.perf_counter()
    bow = BagOfWordsEmbedder(tokenizer, [p.document for p in corpus.pretrain])
    kept, stats = consistency_filter_topk(corpus.pretrain, bow, k=r.filter_k, sample_size=r.filter_sample,
                                          rng_seed=r.seed, return_stats=True)
    kinds = {name: kind for name, (_, kind) in SOURCES.items()}
    plan = desk_plan(Stage.CONTRASTIVE_PRETRAIN, batch_size=r.pretrain_batch, max_steps=r.pretrain_steps,
                     lr=r.pretrain_lr, warmup_steps=r.pretrain_warmup, max_seq=r.trained_context,
                     temperature=r.temperature)
    res = run_stage(plan, encoder, ContrastiveData(group_by_source(kept), tokenizer, kinds), rng_seed=r.seed + 1,
                    out_dir=out / "pretrain" if out else None)
    metrics["pretrain"] = res.metrics
    timings["pretrain"] = time.perf_counter() - t0
    evaluate("pretrain", encoder)

    # stage 3: finetuning with mined hard negatives
    t0 = time.perf_counter()
    ft_docs = [p.document for p in corpus.finetune]
    mined = mine_hard_negatives(corpus.finetune, ft_docs, BagOfWordsEmbedder(tokenizer, ft_docs), top=r.mined_negatives)
    plan = desk_plan(Stage.FINETUNE, batch_size=r.finetune_batch, max_steps=r.finetune_steps, lr=r.finetune_lr,
                     warmup_steps=r.finetune_warmup, max_seq=r.trained_context, hard_negatives=r.hard_negatives,
                     temperature=r.temperature)
    res = run_stage(plan, encoder, ContrastiveData(group_by_source(mined), tokenizer, kinds), rng_seed=r.seed + 2,
                    out_dir=out / "finetune" if out else None)
    metrics["finetune"] = res.metrics
    timings["finetune"] = time.perf_counter() - t0
    evaluate("finetune", encoder)
    timings["total"] = time.perf_counter() - clock

    return RecipeResult(corpus, tokenizer, task, ndcg, nonlocal_baseline[0], encoders, metrics, timings, stats)
