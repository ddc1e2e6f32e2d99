"""Tests for attention, feed-forward, and rotary position embedding."""

import numpy as np
import pytest

from finemoe.layers import (
    ATTENTION_MASK_VALUE, CrossAttention, FeedForward, RMSNorm, SelfAttention,
    flatten_parameters, rope_apply, rope_frequencies,
)
from finemoe.tensor import ShapeError, Tensor, reset_graph

from gradcheck import check_gradients


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class TestRope:
    def test_frequencies_closed_form(self):
        np.testing.assert_allclose(rope_frequencies(4, 100.0), [1.0, 0.1],
                                   rtol=0, atol=1e-15)

    def test_position_zero_is_identity(self):
        reset_graph()
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 8))
        out = rope_apply(Tensor(x), np.zeros(3), 10_000.0)
        np.testing.assert_array_equal(out.data, x)

    def test_single_pair_matches_hand_rotation(self):
        reset_graph()
        x = Tensor([[1.0, 0.0], [0.0, 1.0]])
        out = rope_apply(x, [0.5, 0.5], 10_000.0)   # head_dim 2 -> angle = pos
        c, s = np.cos(0.5), np.sin(0.5)
        np.testing.assert_allclose(out.data, [[c, s], [-s, c]], atol=1e-15)

    def test_norm_preserved(self):
        reset_graph()
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 16))
        out = rope_apply(Tensor(x), np.arange(5), 100.0)
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=1),
                                   np.linalg.norm(x, axis=1), rtol=1e-12)

    def test_relative_position_property(self):
        # <rot(q, m), rot(k, n)> depends only on m - n.
        reset_graph()
        rng = np.random.default_rng(2)
        q = rng.normal(size=(1, 32))
        k = rng.normal(size=(1, 32))
        for base in (100.0, 100_000.0, 5_000_000.0):
            for m, n in [(7, 3), (100, 90), (5, 5), (0, 8)]:
                qm = rope_apply(Tensor(q), [m], base).data
                kn = rope_apply(Tensor(k), [n], base).data
                qd = rope_apply(Tensor(q), [m - n], base).data
                k0 = rope_apply(Tensor(k), [0], base).data
                assert abs(qm @ kn.T - qd @ k0.T) < 1e-9

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 6))
        w = rng.normal(size=(4, 6))

        def build(ts):
            return (rope_apply(ts[0], [0.0, 1.5, 3.0, 10.0], 50.0) * ts[1]).sum()

        check_gradients(build, [x, w])

    def test_odd_head_dim_rejected(self):
        with pytest.raises(ShapeError):
            rope_apply(Tensor(np.zeros((2, 3))), [0, 1], 100.0)

    def test_position_count_mismatch(self):
        with pytest.raises(ShapeError):
            rope_apply(Tensor(np.zeros((2, 4))), [0, 1, 2], 100.0)


class TestFeedForward:
    def test_gated_matches_direct_formula(self):
        reset_graph()
        rng = np.random.default_rng(0)
        ffn = FeedForward(rng, 3, 5, 2, gated=True)
        x = rng.normal(size=(4, 3))
        got = ffn(Tensor(x)).data
        g = x @ ffn.w_gate.data
        expected = ((g * _sigmoid(g)) * (x @ ffn.w_up.data)) @ ffn.w_down.data
        np.testing.assert_allclose(got, expected, atol=1e-14)

    def test_plain_matches_direct_formula(self):
        reset_graph()
        rng = np.random.default_rng(1)
        ffn = FeedForward(rng, 3, 4, 3, gated=False)
        x = rng.normal(size=(2, 3))
        h = x @ ffn.w_up.data
        expected = (h * _sigmoid(h)) @ ffn.w_down.data
        np.testing.assert_allclose(ffn(Tensor(x)).data, expected, atol=1e-14)

    def test_parameter_names(self):
        rng = np.random.default_rng(2)
        assert set(FeedForward(rng, 2, 2, 2, gated=True).parameters()) == {
            "w_gate", "w_up", "w_down"}
        assert set(FeedForward(rng, 2, 2, 2, gated=False).parameters()) == {
            "w_up", "w_down"}

    def test_gradients(self):
        rng = np.random.default_rng(3)
        ffn = FeedForward(rng, 3, 4, 3, gated=True)
        x = rng.normal(size=(2, 3))

        def build(ts):
            ffn.w_gate, ffn.w_up, ffn.w_down = ts[1], ts[2], ts[3]
            return (ffn(ts[0]) * ffn(ts[0])).sum()

        check_gradients(build, [x, ffn.w_gate.data.copy(),
                                ffn.w_up.data.copy(), ffn.w_down.data.copy()])


class TestSelfAttention:
    def test_single_token_is_value_projection(self):
        reset_graph()
        rng = np.random.default_rng(0)
        attn = SelfAttention(rng, 4, 2, causal=True)
        x = rng.normal(size=(1, 4))
        expected = (x @ attn.w_v.data) @ attn.w_o.data
        np.testing.assert_allclose(attn(Tensor(x)).data, expected, atol=1e-14)

    def test_zero_query_causal_averages_prefix(self):
        # With w_q = 0 all scores tie, so row t averages values 0..t.
        reset_graph()
        rng = np.random.default_rng(1)
        attn = SelfAttention(rng, 6, 3, causal=True)
        attn.w_q = Tensor(np.zeros((6, 6)), requires_grad=True)
        x = rng.normal(size=(5, 6))
        v = x @ attn.w_v.data
        expected = np.stack([v[: t + 1].mean(axis=0) for t in range(5)]) @ attn.w_o.data
        np.testing.assert_allclose(attn(Tensor(x)).data, expected, atol=1e-12)

    def test_causality_is_bitwise(self):
        reset_graph()
        rng = np.random.default_rng(2)
        attn = SelfAttention(rng, 8, 2, causal=True, use_rope=True)
        x = rng.normal(size=(6, 8))
        base = attn(Tensor(x), positions=np.arange(6), rope_base=1e4).data
        x2 = x.copy()
        x2[4:] = rng.normal(size=(2, 8)) * 100.0
        out2 = attn(Tensor(x2), positions=np.arange(6), rope_base=1e4).data
        assert np.array_equal(base[:4], out2[:4])

    def test_bidirectional_sees_future(self):
        reset_graph()
        rng = np.random.default_rng(3)
        attn = SelfAttention(rng, 4, 1, causal=False)
        x = rng.normal(size=(3, 4))
        base = attn(Tensor(x)).data
        x2 = x.copy()
        x2[2] += 1.0
        assert not np.allclose(attn(Tensor(x2)).data[0], base[0])

    def test_rope_shifts_with_position(self):
        reset_graph()
        rng = np.random.default_rng(4)
        attn = SelfAttention(rng, 8, 2, causal=True, use_rope=True)
        x = rng.normal(size=(4, 8))
        a = attn(Tensor(x), positions=[0, 1, 2, 3], rope_base=100.0).data
        b = attn(Tensor(x), positions=[0, 2, 4, 6], rope_base=100.0).data
        assert not np.allclose(a, b)

    def test_gradients_causal_rope(self):
        rng = np.random.default_rng(5)
        attn = SelfAttention(rng, 4, 2, causal=True, use_rope=True)
        x = rng.normal(size=(3, 4))
        names = ["w_q", "w_k", "w_v", "w_o"]

        def build(ts):
            for name, t in zip(names, ts[1:]):
                setattr(attn, name, t)
            return attn(ts[0], positions=[0, 1, 2], rope_base=100.0).sum()

        check_gradients(build, [x] + [getattr(attn, n).data.copy() for n in names])

    def test_dim_head_mismatch(self):
        with pytest.raises(ShapeError):
            SelfAttention(np.random.default_rng(0), 5, 2, causal=True)

    def test_mask_value_underflows(self):
        assert np.exp(ATTENTION_MASK_VALUE) == 0.0
        assert np.isfinite(ATTENTION_MASK_VALUE)


class TestCrossAttention:
    def test_single_context_row_ignores_queries(self):
        # One key -> softmax weight 1 -> every query returns the same value.
        reset_graph()
        rng = np.random.default_rng(0)
        xa = CrossAttention(rng, 4, 2)
        queries = rng.normal(size=(5, 4))
        context = rng.normal(size=(1, 4))
        expected = (context @ xa.w_v.data) @ xa.w_o.data
        out = xa(Tensor(queries), Tensor(context)).data
        for row in out:
            np.testing.assert_allclose(row, expected[0], atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(1)
        xa = CrossAttention(rng, 4, 2)
        q = rng.normal(size=(2, 4))
        c = rng.normal(size=(3, 4))
        names = ["w_q", "w_k", "w_v", "w_o"]

        def build(ts):
            for name, t in zip(names, ts[2:]):
                setattr(xa, name, t)
            return xa(ts[0], ts[1]).sum()

        check_gradients(build, [q, c] + [getattr(xa, n).data.copy() for n in names])


class TestPlumbing:
    def test_rms_norm_layer(self):
        reset_graph()
        rng = np.random.default_rng(0)
        norm = RMSNorm(4)
        x = rng.normal(size=(3, 4))
        out = norm(Tensor(x)).data
        rms = np.sqrt((x ** 2).mean(axis=1, keepdims=True) + 1e-6)
        np.testing.assert_allclose(out, x / rms, atol=1e-12)

    def test_flatten_parameters_names(self):
        rng = np.random.default_rng(1)
        layers = [("a", RMSNorm(2)), ("b", FeedForward(rng, 2, 2, 2, gated=False))]
        flat = flatten_parameters("blk.", layers)
        assert set(flat) == {"blk.a.weight", "blk.b.w_up", "blk.b.w_down"}
