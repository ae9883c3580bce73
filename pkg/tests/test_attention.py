import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nerfa.attention import (
    LITERAL,
    PROJECTED,
    AttentionParams,
    BlockParams,
    ConfigError,
    attention_weights,
    count_attention,
    self_attention,
    transformer_block,
)
from nerfa.autograd import Tensor


def attention_oracle(x, wq, wk, wv, wo, heads):
    """Loop over heads and query rows."""
    n, d = x.shape
    dh = d // heads
    q, k, v = x @ wq, x @ wk, x @ wv
    out = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            s = np.array([q[i, sl] @ k[j, sl] for j in range(n)]) / math.sqrt(dh)
            w = np.exp(s - s.max())
            w /= w.sum()
            out[i, sl] = sum(w[j] * v[j, sl] for j in range(n))
    return out @ wo


literal = AttentionParams(LITERAL, 1)


class TestLiteral:
    def test_single_token(self):
        x = np.array([[0.3, -1.2, 2.0]])
        np.testing.assert_allclose(self_attention(Tensor(x), literal).data, x, atol=1e-15)

    def test_identical_tokens(self):
        x = np.tile([0.5, 2.0], (4, 1))
        np.testing.assert_allclose(self_attention(Tensor(x), literal).data, x, atol=1e-15)

    def test_hand_example(self):
        out = self_attention(Tensor(np.eye(2)), literal).data
        np.testing.assert_allclose(out[0], [0.6698, 0.3302], atol=1e-4)
        a = math.exp(1 / math.sqrt(2))
        np.testing.assert_allclose(out[0], [a / (a + 1), 1 / (a + 1)], atol=1e-15)

    def test_equals_projected_identity_single_head(self):
        x = np.random.default_rng(0).normal(size=(5, 4))
        eye = Tensor(np.eye(4))
        proj = AttentionParams(PROJECTED, 1, eye, eye, eye, eye)
        np.testing.assert_allclose(self_attention(Tensor(x), proj).data,
                                   self_attention(Tensor(x), literal).data, atol=1e-14)


class TestProjected:
    @pytest.mark.parametrize("heads", [1, 2, 4])
    def test_matches_loop_oracle(self, heads):
        rng = np.random.default_rng(heads)
        x = rng.normal(size=(6, 8))
        p = AttentionParams.init(8, heads, rng)
        expect = attention_oracle(x, p.wq.data, p.wk.data, p.wv.data, p.wo.data, heads)
        np.testing.assert_allclose(self_attention(Tensor(x), p).data, expect, atol=1e-13)

    def test_batched_equals_per_item(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 5, 8))
        p = AttentionParams.init(8, 2, rng)
        out = self_attention(Tensor(x), p).data
        for i in range(3):
            np.testing.assert_allclose(out[i], self_attention(Tensor(x[i]), p).data, atol=1e-14)

    def test_indivisible_heads(self):
        with pytest.raises(ConfigError):
            AttentionParams.init(6, 4, np.random.default_rng(0))

    def test_literal_has_no_weights(self):
        assert AttentionParams.init(4, 2, np.random.default_rng(0), LITERAL).tensors() == {}

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 8), st.sampled_from([1, 2, 4]), st.integers(0, 2**31))
    def test_weights_are_distributions(self, n, heads, seed):
        rng = np.random.default_rng(seed)
        p = AttentionParams.init(8, heads, rng)
        w = attention_weights(rng.normal(size=(n, 8)), p)
        assert w.shape == (heads, n, n)
        assert (w >= 0).all()
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 2**31), st.sampled_from([LITERAL, PROJECTED]))
    def test_permutation_equivariance(self, n, seed, mode):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, 4))
        p = AttentionParams.init(4, 2, rng, mode)
        perm = rng.permutation(n)
        np.testing.assert_allclose(self_attention(Tensor(x[perm]), p).data,
                                   self_attention(Tensor(x), p).data[perm], atol=1e-13)


class TestBlock:
    def test_zero_output_projection_is_identity(self):
        rng = np.random.default_rng(0)
        bp = BlockParams.init(8, 2, 3, rng)
        for a in bp.attention:
            a.wo.data[:] = 0
        x = rng.normal(size=(5, 8))
        np.testing.assert_array_equal(transformer_block(Tensor(x), bp).data, x)

    def test_matches_prenorm_residual_oracle(self):
        rng = np.random.default_rng(1)
        bp = BlockParams.init(4, 2, 2, rng)
        for g, b in zip(bp.ln_gamma, bp.ln_beta):
            g.data[:] = rng.uniform(0.5, 1.5, 4)
            b.data[:] = rng.uniform(-0.5, 0.5, 4)
        x = rng.normal(size=(3, 4))
        h = x.copy()
        for a, g, b in zip(bp.attention, bp.ln_gamma, bp.ln_beta):
            mu, var = h.mean(-1, keepdims=True), h.var(-1, keepdims=True)
            ln = (h - mu) / np.sqrt(var + 1e-7) * g.data + b.data
            h = attention_oracle(ln, a.wq.data, a.wk.data, a.wv.data, a.wo.data, 2) + h
        np.testing.assert_allclose(transformer_block(Tensor(x), bp).data, h, atol=1e-12)

    def test_parameter_names(self):
        bp = BlockParams.init(4, 2, 2, np.random.default_rng(0), prefix="ray")
        assert list(bp.tensors()) == [
            "ray.0.ln_gamma", "ray.0.ln_beta", "ray.0.wq", "ray.0.wk", "ray.0.wv", "ray.0.wo",
            "ray.1.ln_gamma", "ray.1.ln_beta", "ray.1.wq", "ray.1.wk", "ray.1.wv", "ray.1.wo",
        ]

    def test_counter_tallies_score_and_value_products(self):
        bp = BlockParams.init(8, 4, 2, np.random.default_rng(0))
        with count_attention() as c:
            transformer_block(Tensor(np.ones((3, 5, 8))), bp, stage="ray")
        assert c.counts == {"ray": 2 * 2 * 3 * 5 * 5 * 8}
