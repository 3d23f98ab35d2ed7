import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from desk_embed.rope import (
    PolicyKind,
    RopeParams,
    RopePolicy,
    apply_rope,
    dynamic_ntk_base,
    effective_rope,
    interpolate_positions,
    ntk_base,
)


def _pair_norms(x):
    return np.linalg.norm(x.reshape(*x.shape[:-1], -1, 2), axis=-1)


class TestApplyRope:
    def test_position_zero_is_identity(self):
        x = np.random.default_rng(0).standard_normal((1, 8))
        np.testing.assert_array_equal(apply_rope(x, [0.0]).data, x)

    def test_pair_norms_preserved(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((50, 16))
        out = apply_rope(x, rng.uniform(0, 5000, 50)).data
        assert np.max(np.abs(_pair_norms(out) - _pair_norms(x))) <= 1e-12

    @pytest.mark.parametrize("delta", [1, 7, 100])
    def test_relative_shift(self, delta):
        rng = np.random.default_rng(delta)
        q, k = rng.standard_normal((2, 1, 32))
        for m, n in [(0, 3), (5, 2), (40, 90)]:
            a = apply_rope(q, [m]).data @ apply_rope(k, [n]).data.T
            b = apply_rope(q, [m + delta]).data @ apply_rope(k, [n + delta]).data.T
            assert abs(a - b).max() <= 1e-9

    def test_hand_rotation(self):
        # head_dim 4, base 100: pair 0 rotates by m, pair 1 by m / 10
        x = np.array([[1.0, 0.0, 1.0, 0.0]])
        out = apply_rope(x, [2.0], base=100.0).data[0]
        np.testing.assert_allclose(out, [math.cos(2), math.sin(2), math.cos(0.2), math.sin(0.2)], atol=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError, match="even"):
            apply_rope(np.ones((2, 5)), [0, 1])
        with pytest.raises(ValueError, match="positions"):
            apply_rope(np.ones((2, 4)), [0])


class TestScaling:
    def test_interpolate(self):
        assert interpolate_positions(0, 2048, 8192) == 0
        assert interpolate_positions(4096, 2048, 8192) == 1024
        assert interpolate_positions(77, 512, 512) == 77
        with pytest.raises(ValueError):
            interpolate_positions(1, 10, 5)

    def test_ntk_base_values(self):
        assert ntk_base(1000.0, 1.0, 64) == 1000.0
        assert ntk_base(10000.0, 4.0, 128) == pytest.approx(40889, rel=1e-4)
        assert ntk_base(1000.0, 2.0, 64) == 1000.0 * 2.0 ** (64 / 62)
        with pytest.raises(ValueError):
            ntk_base(1000.0, 2.0, 2)

    def test_dynamic_values(self):
        assert dynamic_ntk_base(1000.0, 1.0, 2.0, 64) == 1000.0
        assert dynamic_ntk_base(1000.0, 0.3, 2.0, 64) == 1000.0
        assert dynamic_ntk_base(1000.0, 2.0, 2.0, 64) == 1000.0 * 3.0 ** (64 / 62)
        with pytest.raises(ValueError):
            dynamic_ntk_base(1000.0, 2.0, 0.5, 64)
        with pytest.raises(ValueError):
            dynamic_ntk_base(1000.0, 2.0, 2.0, 2)

    @settings(max_examples=200, deadline=None)
    @given(b=st.floats(2.0, 1e5), s=st.floats(1.0, 64.0), D=st.sampled_from([4, 8, 16, 32, 64, 128]))
    def test_alpha_one_matches_ntk(self, b, s, D):
        assert dynamic_ntk_base(b, s, 1.0, D) == ntk_base(b, s, D)

    @settings(max_examples=200, deadline=None)
    @given(s=st.floats(1.0, 8.0), alpha=st.floats(1.0, 8.0))
    def test_dynamic_monotone_and_continuous(self, s, alpha):
        lo = dynamic_ntk_base(1000.0, s, alpha, 32)
        hi = dynamic_ntk_base(1000.0, s + 1e-9, alpha, 32)
        assert lo <= hi and hi - lo < 1e-3


class TestEffectiveRope:
    params = RopeParams(base=1000.0, head_dim=32, trained_context=64)

    def test_none(self):
        for n in (1, 64, 500):
            base, pos = effective_rope(self.params, RopePolicy.none(), n)
            assert base == 1000.0 and pos(17) == 17

    def test_dynamic_within_context(self):
        base, pos = effective_rope(self.params, RopePolicy.dynamic(2.0), 64)
        assert base == 1000.0 and pos(9) == 9

    def test_dynamic_beyond_context(self):
        base, _ = effective_rope(self.params, RopePolicy.dynamic(2.0), 128)
        assert base == 1000.0 * 3.0 ** (32 / 30)

    def test_position_interpolation(self):
        pol = RopePolicy(PolicyKind.POSITION_INTERPOLATION, target_context=256)
        base, pos = effective_rope(self.params, pol, 200)
        assert base == 1000.0 and pos(128) == 32

    def test_ntk_aware(self):
        pol = RopePolicy(PolicyKind.NTK_AWARE, target_context=256)
        base, pos = effective_rope(self.params, pol, 10)
        assert base == ntk_base(1000.0, 4.0, 32) and pos(5) == 5

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            RopeParams(head_dim=2)
        with pytest.raises(ValueError):
            RopeParams(base=1.0)
        with pytest.raises(ValueError):
            RopePolicy(PolicyKind.DYNAMIC_NTK, alpha=0.5)
        with pytest.raises(ValueError, match="below"):
            effective_rope(self.params, RopePolicy(PolicyKind.NTK_AWARE, target_context=32), 10)

    def test_parse(self):
        pol = RopePolicy.parse("dynamic_ntk:2")
        assert pol.kind is PolicyKind.DYNAMIC_NTK and pol.alpha == 2.0
        assert RopePolicy.parse("none").kind is PolicyKind.NONE
