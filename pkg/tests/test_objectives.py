import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_batch
from desk_embed import autodiff as ad
from desk_embed.objectives import (
    IGNORE_INDEX,
    ContrastiveBatch,
    RawContrastiveBatch,
    contrastive_loss,
    gradcache_grads,
    info_nce,
    info_nce_hard,
    mlm_loss,
    mlm_mask,
    monolithic_grads,
)


def _unit_with_cosines(cos_matrix):
    """Query/doc embeddings whose cosine matrix is ``cos_matrix`` (docs are one-hot)."""
    n = cos_matrix.shape[0]
    return np.asarray(cos_matrix, dtype=np.float64), np.eye(n)


class TestInfoNce:
    def test_single_pair_is_zero(self):
        loss = contrastive_loss(np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]]), temperature=0.05)
        assert loss.item() == 0.0

    def test_hand_value(self):
        # positives cos 1, negatives cos 0, tau 1 -> ln(1 + e^-1)
        q, d = _unit_with_cosines(np.eye(2))
        assert contrastive_loss(q, d, temperature=1.0).item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)

    @pytest.mark.parametrize("n", [2, 3, 8, 31])
    def test_uniform_similarity_is_ln_n(self, n):
        q = np.ones((n, 4))
        assert abs(contrastive_loss(q, q.copy(), temperature=0.05).item() - math.log(n)) <= 1e-12

    def test_hard_with_zero_negatives_equals_plain_bitwise(self):
        rng = np.random.default_rng(0)
        q, d = rng.standard_normal((2, 6, 8))
        plain = info_nce(ContrastiveBatch(q, d)).item()
        hard = info_nce_hard(ContrastiveBatch(q, d, np.zeros((6, 0, 8)))).item()
        assert plain == hard

    def test_uniform_with_hard_negatives_is_ln_9(self):
        q = np.ones((2, 4))
        loss = contrastive_loss(q, q.copy(), np.ones((2, 7, 4)), temperature=0.05)
        assert abs(loss.item() - math.log(9)) <= 1e-12

    def test_hard_negatives_are_not_shared(self):
        rng = np.random.default_rng(1)
        q, d = rng.standard_normal((2, 4, 8))
        hn = rng.standard_normal((4, 3, 8))

        def q0_grad(negs):
            qt = ad.Tensor(q, requires_grad=True)
            contrastive_loss(qt, d, negs).backward()
            return qt.grad[0]

        other = hn.copy()
        other[1:] = rng.standard_normal(other[1:].shape)
        np.testing.assert_array_equal(q0_grad(hn), q0_grad(other))

    def test_better_positive_lowers_loss(self):
        cos = np.full((3, 3), 0.2)
        np.fill_diagonal(cos, 0.5)
        q, d = _unit_with_cosines(cos)
        worse = contrastive_loss(q, d, temperature=0.1).item()
        cos[0, 0] = 0.9
        q, d = _unit_with_cosines(cos)
        assert contrastive_loss(q, d, temperature=0.1).item() < worse

    @settings(max_examples=50, deadline=None)
    @given(scale=st.floats(0.01, 100.0), seed=st.integers(0, 10_000))
    def test_scale_invariance(self, scale, seed):
        rng = np.random.default_rng(seed)
        q, d = rng.standard_normal((2, 5, 6))
        a = contrastive_loss(q, d).item()
        b = contrastive_loss(q * scale, d).item()
        assert abs(a - b) <= 1e-9 * max(1.0, abs(a))

    def test_bidirectional_adds_document_side(self):
        q = np.array([[1.0, 0.0], [1.0, 0.0]])
        d = np.array([[1.0, 0.0], [0.0, 1.0]])
        one = contrastive_loss(q, d, temperature=1.0).item()
        two = contrastive_loss(q, d, temperature=1.0, bidirectional=True).item()
        assert one != two

    def test_errors(self):
        with pytest.raises(ValueError, match="zero-norm"):
            contrastive_loss(np.zeros((2, 3)), np.ones((2, 3)))
        with pytest.raises(ad.ShapeError):
            contrastive_loss(np.ones((2, 3)), np.ones((3, 3)))
        with pytest.raises(ad.ShapeError):
            contrastive_loss(np.ones((2, 3)), np.ones((2, 3)), np.ones((3, 1, 3)))
        with pytest.raises(ValueError):
            contrastive_loss(np.ones((2, 3)), np.ones((2, 3)), temperature=0.0)


class TestContrastiveGradients:
    def test_info_nce(self):
        rng = np.random.default_rng(2)
        rep = ad.finite_diff_check(lambda q, d: contrastive_loss(q, d, temperature=0.5),
                                   {"q": rng.standard_normal((4, 5)), "d": rng.standard_normal((4, 5))})
        assert all(r["ok"] for r in rep.values()), rep

    def test_info_nce_hard(self):
        rng = np.random.default_rng(3)
        inputs = {"q": rng.standard_normal((3, 4)), "d": rng.standard_normal((3, 4)),
                  "hn": rng.standard_normal((3, 2, 4))}
        rep = ad.finite_diff_check(lambda q, d, hn: contrastive_loss(q, d, hn, temperature=0.5), inputs)
        assert all(r["ok"] for r in rep.values()), rep


def _raw_batch(rng, n, H=0):
    q = random_batch(rng, n, 6)
    d = random_batch(rng, n, 10)
    negs = random_batch(rng, n * H, 10) if H else None
    return RawContrastiveBatch(q, d, negs, H)


def _max_rel(a, b):
    return max(np.abs(a[k] - b[k]).max() / max(np.abs(b[k]).max(), 1e-300) for k in b)


class TestGradCache:
    @pytest.mark.parametrize("chunk", [1, 2, 4, 8])
    def test_matches_monolithic(self, toy_encoder, chunk):
        raw = _raw_batch(np.random.default_rng(4), 8)
        loss_ref, ref = monolithic_grads(toy_encoder, raw)
        loss, got = gradcache_grads(toy_encoder, raw, chunk)
        assert abs(loss - loss_ref) <= 1e-12 * abs(loss_ref)
        assert _max_rel(got, ref) <= 1e-9

    @pytest.mark.parametrize("chunk", [1, 4])
    def test_with_hard_negatives(self, toy_encoder, chunk):
        raw = _raw_batch(np.random.default_rng(5), 4, H=2)
        _, ref = monolithic_grads(toy_encoder, raw)
        _, got = gradcache_grads(toy_encoder, raw, chunk)
        assert _max_rel(got, ref) <= 1e-9

    def test_chunk_must_divide(self, toy_encoder):
        with pytest.raises(ValueError, match="divide"):
            gradcache_grads(toy_encoder, _raw_batch(np.random.default_rng(6), 8), 3)


class TestMlm:
    def test_mask_statistics(self):
        tokens = np.random.default_rng(0).integers(10, 1000, size=(200, 200))
        b = mlm_mask(tokens, 0.3, 1, mask_id=3, random_range=(10, 1000))
        sel = b.labels != IGNORE_INDEX
        assert abs(sel.mean() - 0.3) < 0.01
        masked = (b.input_ids == 3) & sel
        unchanged = (b.input_ids == tokens) & sel
        assert abs(masked.sum() / sel.sum() - 0.8) < 0.01
        # unchanged includes random draws that happen to hit the original token
        assert abs(unchanged.sum() / sel.sum() - 0.1) < 0.01
        np.testing.assert_array_equal(b.labels[sel], tokens[sel])
        np.testing.assert_array_equal(b.input_ids[~sel], tokens[~sel])

    def test_specials_never_selected(self):
        tokens = np.tile([1, 7, 8, 9, 0], (50, 1))
        b = mlm_mask(tokens, 0.5, 2, mask_id=3, special_ids=(0, 1))
        assert np.all(b.labels[:, [0, 4]] == IGNORE_INDEX)

    def test_deterministic(self):
        tokens = np.arange(100).reshape(4, 25) + 5
        a = mlm_mask(tokens, 0.3, 9, mask_id=3)
        b = mlm_mask(tokens, 0.3, 9, mask_id=3)
        np.testing.assert_array_equal(a.input_ids, b.input_ids)

    def test_empty_selection_raises(self):
        with pytest.raises(ValueError, match="no positions"):
            mlm_mask(np.array([[0, 0]]), 0.3, 0, mask_id=3, special_ids=(0,))
        with pytest.raises(ValueError):
            mlm_mask(np.ones((2, 2)), 1.5, 0, mask_id=3)

    def test_loss_on_uniform_logits(self):
        labels = np.array([[2, IGNORE_INDEX, 5]])
        loss = mlm_loss(np.zeros((1, 3, 64)), labels)
        assert loss.item() == pytest.approx(math.log(64), abs=1e-12)
        with pytest.raises(ValueError):
            mlm_loss(np.zeros((1, 2, 4)), np.full((1, 2), IGNORE_INDEX))
