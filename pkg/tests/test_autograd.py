import gc
import math
import weakref

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nerfa import autograd as ag
from nerfa.autograd import ContractError, Graph, ShapeError, Tensor, backward
from nerfa.gradcheck import check, op_checks


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_hand_example(self):
        out = ag.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])
        np.testing.assert_array_equal(naive_matmul(np.array([[1.0, 2], [3, 4]]), np.array([[5.0, 6], [7, 8]])),
                                      [[19, 22], [43, 50]])

    def test_identity_and_zero(self):
        a = np.random.default_rng(0).normal(size=(4, 5))
        np.testing.assert_array_equal(ag.matmul(Tensor(a), Tensor(np.eye(5))).data, a)
        np.testing.assert_array_equal(ag.matmul(Tensor(a), Tensor(np.zeros((5, 3)))).data, 0)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31))
    def test_agrees_with_triple_loop(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(-1, 1, (m, k)), rng.uniform(-1, 1, (k, n))
        np.testing.assert_allclose(ag.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=0, atol=1e-12)


class TestSoftmax:
    def test_examples(self):
        np.testing.assert_allclose(ag.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
        np.testing.assert_allclose(ag.softmax(Tensor([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)
        for x in (-1e9, 0.0, 3.7, 1e9):
            assert ag.softmax(Tensor([x])).data.tolist() == [1.0]

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            ag.softmax(Tensor(np.ones((2, 3))), axis=2)

    def test_stable_for_large_inputs(self):
        out = ag.softmax(Tensor([1000.0, 1000.0, -1000.0])).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [0.5, 0.5, 0.0])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
                  elements=st.floats(-50, 50)), st.sampled_from([0, 1, -1]))
    def test_slices_sum_to_one(self, x, axis):
        out = ag.softmax(Tensor(x), axis=axis).data
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-12)


class TestLayerNorm:
    def _ln(self, x, d, eps=ag.LN_EPS, gamma=None, beta=None):
        g = Tensor(np.ones(d) if gamma is None else gamma)
        b = Tensor(np.zeros(d) if beta is None else beta)
        return ag.layer_norm(Tensor(x), g, b, eps).data

    def test_constant_vector_maps_to_zero(self):
        np.testing.assert_allclose(self._ln(np.full(5, 0.1), 5), 0.0, atol=1e-12)

    def test_two_point_example(self):
        np.testing.assert_allclose(self._ln(np.array([1.0, 3.0]), 2, eps=1e-14), [-1.0, 1.0], atol=1e-12)

    def test_zero_gamma_gives_beta(self):
        beta = np.array([0.5, -2.0, 3.0])
        out = self._ln(np.random.default_rng(0).normal(size=(4, 3)), 3, gamma=np.zeros(3), beta=beta)
        np.testing.assert_array_equal(out, np.broadcast_to(beta, (4, 3)))

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            ag.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 16), st.integers(0, 2**31), st.floats(1.0, 100.0))
    def test_moments(self, d, seed, scale):
        x = np.random.default_rng(seed).normal(size=(3, d))
        x = x / x.std(axis=-1, keepdims=True) * scale + 7.0  # variance >= 1
        out = self._ln(x, d)
        assert np.abs(out.mean(axis=-1)).max() < 1e-10
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-6


class TestElementwise:
    def test_exp_of_zeros(self):
        np.testing.assert_array_equal(ag.exp(Tensor([0.0, 0.0, 0.0])).data, [1.0, 1.0, 1.0])

    def test_exp_clamp_and_subgradient(self):
        x = Tensor([-100.0, 0.0, 100.0], requires_grad=True)
        y = ag.exp(x)
        assert np.isfinite(y.data).all()
        np.testing.assert_array_equal(y.data, [math.exp(-60), 1.0, math.exp(60)])
        backward(y.sum())
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_exclusive_cumsum(self):
        x = Tensor([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(ag.cumulative_sum(x, 0, exclusive=True).data, [0, 1, 3])
        np.testing.assert_array_equal(ag.cumulative_sum(x, 0).data, [1, 3, 6])

    def test_exclusive_cumsum_matches_running_sum_oracle(self):
        x = np.random.default_rng(3).normal(size=(4, 7, 2))
        oracle = np.zeros_like(x)
        for i in range(1, 7):
            oracle[:, i] = oracle[:, i - 1] + x[:, i - 1]
        np.testing.assert_allclose(ag.cumulative_sum(Tensor(x), 1, exclusive=True).data, oracle, atol=1e-14)

    def test_mean_of_identical_rows(self):
        row = np.array([0.3, -1.0, 2.5])
        np.testing.assert_allclose(ag.mean_along_axis(Tensor(np.tile(row, (5, 1))), 0).data, row, atol=1e-15)

    def test_broadcast_shape_error(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones(4))

    def test_sigmoid_extremes_finite(self):
        out = ag.sigmoid(Tensor([-800.0, 0.0, 800.0])).data
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


class TestBackward:
    def test_power_rule(self):
        x = Tensor(3.0, requires_grad=True)
        backward(x * x)
        assert x.grad == 6.0

    def test_sum_of_softmax_has_zero_grad(self):
        x = Tensor(np.random.default_rng(0).normal(size=5), requires_grad=True)
        backward(ag.softmax(x).sum())
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-15)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_untracked_tensors_untouched(self):
        x = Tensor(np.ones(3), requires_grad=True)
        c = Tensor(np.full(3, 2.0))
        backward((x * c).sum())
        assert c.grad is None
        np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])

    def test_every_tracked_leaf_gets_grad(self):
        x = Tensor([-1.0, -2.0], requires_grad=True)  # relu kills all gradient
        backward(ag.relu(x).sum())
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_replay_is_reverse_execution_order(self):
        x = Tensor([0.5, 1.5], requires_grad=True)
        y = ag.exp(x)
        z = ag.square(y) + y
        loss = z.sum()
        graph = Graph.trace(loss)
        seqs = [n.seq for n in graph.nodes]
        assert seqs == sorted(seqs)
        assert [n.op for n in graph.nodes] == ["exp", "square", "add", "sum"]

        visited = []
        for node in graph.nodes:
            inner = node.backward

            def wrapped(g, _inner=inner, _node=node):
                visited.append(_node.seq)
                return _inner(g)
            node.backward = wrapped
        backward(loss, graph)
        assert visited == seqs[::-1]

    def test_deterministic_bitwise(self):
        def grads():
            rng = np.random.default_rng(5)
            x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            backward(ag.softmax(x @ w, axis=-1).mean() + ag.square(x).sum())
            return x.grad.tobytes() + w.grad.tobytes()
        assert grads() == grads()

    def test_scalars_stay_zero_dimensional(self):
        x = Tensor(3.0, requires_grad=True)
        y = Tensor(np.ones((2, 3)), requires_grad=True)[1, 2]
        assert x.shape == () and y.shape == ()
        backward(x * y)
        assert x.grad.shape == () and y.shape == ()

    def test_graph_freed_without_cycle_collector(self):
        gc.disable()
        try:
            x = Tensor(np.ones(4), requires_grad=True)
            hidden = ag.exp(x * 2.0)
            probe = weakref.ref(hidden)
            loss = hidden.sum()
            backward(loss)
            del hidden, loss
            assert probe() is None
        finally:
            gc.enable()

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with ag.no_grad():
            y = x * 3.0
        assert y.is_leaf and not y.requires_grad


def test_every_op_matches_finite_differences():
    failures = [(r.name, r.rel_error) for r in op_checks() if not r.passed]
    assert not failures


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_random_inputs_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-1, 1, (2, 3)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (3, 3)), requires_grad=True)
    g, b = Tensor(rng.uniform(-1, 1, 3), requires_grad=True), Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
    proj = Tensor(rng.uniform(-1, 1, (2, 3)))

    def fn():
        h = ag.layer_norm(x @ w, g, b)
        return (ag.softmax(h, axis=-1) * ag.exp(ag.cumulative_sum(h, 1, exclusive=True)) * proj).sum()

    assert check("composite", fn, [x, w, g, b]).passed
