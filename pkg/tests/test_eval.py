import json
import math

import numpy as np
import pytest

from conftest import toy_config
from desk_embed.data.synthetic import SyntheticWorld
from desk_embed.data.tokenizer import Tokenizer
from desk_embed.encoder import Encoder, TaskKind
from desk_embed.eval.extrapolation import SWEEP_FIELDS, extrapolation_sweep, make_needle_task, write_sweep
from desk_embed.eval.metrics import ndcg_at_k, random_ndcg_expectation
from desk_embed.eval.retrieval import RetrievalTask, embed_corpus, rank_documents, retrieval_eval, score_rankings
from desk_embed.rope import PolicyKind, RopePolicy


class TestNdcg:
    def test_perfect(self):
        assert ndcg_at_k(["a", "b", "c"], {"a": 1, "b": 1}) == 1.0

    def test_rank_two(self):
        assert ndcg_at_k(["x", "a", "y"], {"a": 1}, k=10) == pytest.approx(1 / math.log2(3), abs=1e-15)
        assert ndcg_at_k(["x", "a", "y"], {"a": 1}, k=10) == pytest.approx(0.6309, abs=1e-4)

    def test_outside_k(self):
        assert ndcg_at_k(["x", "y", "a"], {"a": 1}, k=2) == 0.0

    def test_graded(self):
        # gains 3 and 1 in swapped order
        got = ndcg_at_k(["b", "a"], {"a": 2, "b": 1})
        assert got == pytest.approx((1 + 3 / math.log2(3)) / (3 + 1 / math.log2(3)))

    def test_no_relevant_is_skipped(self):
        assert ndcg_at_k(["a"], {"a": 0}) is None
        with pytest.raises(ValueError):
            ndcg_at_k(["a"], {"a": 1}, k=0)

    def test_random_expectation_monte_carlo(self):
        rng = np.random.default_rng(0)
        docs = [f"d{i}" for i in range(50)]
        qrels = {"d3": 1, "d7": 2}
        samples = [ndcg_at_k(list(rng.permutation(docs)), qrels, 10) for _ in range(40_000)]
        expected = random_ndcg_expectation(qrels, 50, 10)
        assert abs(np.mean(samples) - expected) < 4 * np.std(samples) / math.sqrt(len(samples))


class TestRanking:
    def test_ties_by_doc_id(self):
        assert rank_documents(np.array([0.5, 0.9, 0.5]), ["c", "a", "b"]) == ["a", "b", "c"]

    def test_monotone_transform_invariant(self):
        rng = np.random.default_rng(1)
        q, d = rng.standard_normal((4, 3)), rng.standard_normal((12, 3))
        task = RetrievalTask({f"q{i}": "x" for i in range(4)}, {f"d{j}": "y" for j in range(12)},
                             {f"q{i}": {f"d{i}": 1.0} for i in range(4)})
        a = score_rankings(q, d, task)
        b = score_rankings(q * 3.0, d, task)
        assert a.per_query == b.per_query

    def test_corpus_permutation_invariant(self):
        rng = np.random.default_rng(2)
        q, d = rng.standard_normal((5, 4)), rng.standard_normal((20, 4))
        ids = [f"d{j:02d}" for j in range(20)]
        qrels = {f"q{i}": {ids[i * 3]: 1.0} for i in range(5)}
        queries = {f"q{i}": "x" for i in range(5)}
        base = score_rankings(q, d, RetrievalTask(queries, dict(zip(ids, "y" * 20)), qrels))
        perm = rng.permutation(20)
        shuffled = RetrievalTask(queries, {ids[j]: "y" for j in perm}, qrels)
        assert score_rankings(q, d[perm], shuffled).mean_ndcg == base.mean_ndcg

    def test_task_validation(self):
        with pytest.raises(ValueError, match="unknown"):
            RetrievalTask({"q": "x"}, {"d": "y"}, {"q": {"z": 1.0}})
        with pytest.raises(ValueError, match="negative"):
            RetrievalTask({"q": "x"}, {"d": "y"}, {"q": {"d": -1.0}})

    def test_task_files_round_trip(self, tmp_path):
        task = RetrievalTask({"q1": "a b"}, {"d1": "c", "d2": "d"}, {"q1": {"d2": 1.0}})
        paths = [tmp_path / n for n in ("q.jsonl", "c.jsonl", "r.jsonl")]
        task.save(*paths)
        assert RetrievalTask.load(*paths) == task


@pytest.fixture(scope="module")
def world_and_tok():
    world = SyntheticWorld.create(n_topics=6, words_per_topic=12, seed=4)
    tok = Tokenizer.build([" ".join(world.vocabulary)])
    return world, tok


def _encoder(tok):
    return Encoder(toy_config(vocab_size=tok.padded_vocab_size, trained_context=32), seed=1)


class TestEmbedding:
    def test_unit_norm_for_retrieval(self, world_and_tok):
        world, tok = world_and_tok
        texts = [world.document(world.entity()) for _ in range(5)]
        emb = embed_corpus(_encoder(tok), tok, texts, TaskKind.SEARCH_DOCUMENT, max_tokens=32)
        np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-9)

    def test_classification_not_normalized(self, world_and_tok):
        _, tok = world_and_tok
        emb = embed_corpus(_encoder(tok), tok, ["a b c"], "classification")
        assert abs(np.linalg.norm(emb) - 1.0) > 1e-6

    def test_truncation_is_noop_for_short_text(self, world_and_tok):
        _, tok = world_and_tok
        enc = _encoder(tok)
        a = embed_corpus(enc, tok, ["x y"], "clustering", max_tokens=32)
        b = embed_corpus(enc, tok, ["x y"], "clustering", max_tokens=10)
        np.testing.assert_array_equal(a, b)

    def test_batch_independent(self, world_and_tok):
        world, tok = world_and_tok
        enc = _encoder(tok)
        texts = [world.document(world.entity()) for _ in range(4)]
        together = embed_corpus(enc, tok, texts, "search_document", max_tokens=32)
        alone = np.vstack([embed_corpus(enc, tok, [t], "search_document", max_tokens=32) for t in texts])
        np.testing.assert_array_equal(together, alone)

    def test_dynamic_ntk_engaged_beyond_context(self, world_and_tok):
        world, tok = world_and_tok
        text = world.needle_document(world.entity(), 80)
        trace = []
        embed_corpus(_encoder(tok), tok, [text], "search_document", max_tokens=64, trace=trace)
        # 64 tokens against L = 32 is s = 2; head_dim 8
        assert trace[0]["length"] == 64
        assert trace[0]["rope_base"] == 1000.0 * 3.0 ** (8 / 6)

    def test_single_relevant_doc(self, world_and_tok):
        _, tok = world_and_tok
        task = RetrievalTask({"q": "a"}, {"d": "b"}, {"q": {"d": 1.0}})
        assert retrieval_eval(_encoder(tok), tok, task).mean_ndcg == 1.0

    def test_random_encoder_near_baseline(self, world_and_tok):
        world, tok = world_and_tok
        rng = np.random.default_rng(0)
        vocab = world.vocabulary
        queries = {f"q{i}": " ".join(rng.choice(vocab, 4)) for i in range(40)}
        corpus = {f"d{i}": " ".join(rng.choice(vocab, 12)) for i in range(40)}
        task = RetrievalTask(queries, corpus, {f"q{i}": {f"d{i}": 1.0} for i in range(40)})
        report = retrieval_eval(_encoder(tok), tok, task)
        assert abs(report.mean_ndcg - report.random_baseline) < 0.15

    def test_empty_task(self, world_and_tok):
        _, tok = world_and_tok
        with pytest.raises(ValueError):
            retrieval_eval(_encoder(tok), tok, RetrievalTask({}, {}, {}))


class TestSweep:
    POLICIES = [RopePolicy.none(), RopePolicy(PolicyKind.POSITION_INTERPOLATION),
                RopePolicy(PolicyKind.NTK_AWARE), RopePolicy.dynamic(2.0)]

    def test_schema_and_degeneracy(self, world_and_tok, tmp_path):
        world, tok = world_and_tok
        enc = _encoder(tok)
        probe = make_needle_task(world, 8, 140)
        cells = extrapolation_sweep(enc, tok, [16, 32, 128], self.POLICIES, probe)
        for length in (16, 32):
            row = [c for c in cells if c.length == length]
            assert len(row) == 4
            assert len({c.ndcg_at_10 for c in row}) == 1 and len({c.rope_base for c in row}) == 1
        long_row = {c.policy: c for c in cells if c.length == 128}
        assert "none" not in long_row and len(long_row) == 3
        write_sweep(tmp_path / "sweep.jsonl", cells)
        lines = [json.loads(l) for l in (tmp_path / "sweep.jsonl").read_text().splitlines()]
        assert len(lines) == len(cells) and all(tuple(l) == SWEEP_FIELDS for l in lines)

    def test_lengths_must_be_sorted(self, world_and_tok):
        world, tok = world_and_tok
        with pytest.raises(ValueError):
            extrapolation_sweep(_encoder(tok), tok, [32, 16], self.POLICIES, make_needle_task(world, 2, 40))
