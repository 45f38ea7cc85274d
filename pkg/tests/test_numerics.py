"""Unit tests for the autodiff core: ops against independent oracles.

Each expected value is produced by a deliberately naive reference
implementation (exp-normalize softmax, triple-loop matmul, single-query
attention loop, log-sum-exp cross entropy) so the production code is never
checked against itself.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mist import numerics as nx


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- oracles -----------------------------------------------------------------


def softmax_oracle(v):
    """Plain exp-normalize without the max shift."""
    e = np.exp(np.asarray(v, dtype=np.float64))
    return e / e.sum()


def matmul_oracle(a, b):
    """Triple loop matrix product."""
    a = np.asarray(a)
    b = np.asarray(b)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def attention_oracle(x, wq, wk, wv, wo, heads):
    """Single-query loop over tokens and heads, dense numpy only."""
    n, d = x.shape
    dk = d // heads
    q = x @ wq.T
    k = x @ wk.T
    v = x @ wv.T
    mixed = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        for i in range(n):
            logits = np.array([q[i, sl] @ k[j, sl] for j in range(n)]) / math.sqrt(dk)
            w = softmax_oracle(logits)
            for j in range(n):
                mixed[i, sl] += w[j] * v[j, sl]
    return mixed @ wo.T


def cross_entropy_oracle(scores, label):
    """log-sum-exp minus the true score, no stabilization tricks."""
    s = np.asarray(scores, dtype=np.float64)
    return math.log(np.exp(s).sum()) - s[label]


def fd_grad(f, x, eps=1e-6):
    """Central-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        gf[i] = (up - down) / (2 * eps)
    return g


# -- softmax -----------------------------------------------------------------


class TestSoftmax:
    def test_uniform_logits(self):
        out = nx.softmax(nx.tensor([0.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.25] * 4, rtol=0, atol=1e-15)

    def test_log_ratio(self):
        # softmax([ln 1, ln 3]) puts mass proportional to [1, 3]
        out = nx.softmax(nx.tensor([math.log(1.0), math.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_matches_oracle(self, rng):
        v = rng.normal(size=5)
        out = nx.softmax(nx.tensor(v))
        np.testing.assert_allclose(out.data, softmax_oracle(v), atol=1e-12)

    def test_large_logits_stable(self):
        out = nx.softmax(nx.tensor([1000.0, 1000.0, 999.0]))
        assert np.all(np.isfinite(out.data))
        assert abs(out.data.sum() - 1.0) < 1e-12

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    @settings(max_examples=50, deadline=None)
    def test_simplex_and_shift_invariance(self, logits):
        v = np.asarray(logits)
        out = nx.softmax(nx.tensor(v)).data
        assert abs(out.sum() - 1.0) < 1e-9
        assert np.all(out >= 0)
        shifted = nx.softmax(nx.tensor(v + 7.5)).data
        np.testing.assert_allclose(out, shifted, atol=1e-12)

    def test_axis_rows(self, rng):
        m = rng.normal(size=(3, 4))
        out = nx.softmax(nx.tensor(m), axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), np.ones(3), atol=1e-12)
        for i in range(3):
            np.testing.assert_allclose(out[i], softmax_oracle(m[i]), atol=1e-12)

    def test_backward_matches_fd(self, rng):
        v = rng.normal(size=6)
        w = rng.normal(size=6)
        p = nx.parameter(v, "v")

        def loss_of(arr):
            return float((softmax_oracle(arr) * w).sum())

        loss = nx.tsum(nx.mul(nx.softmax(p), nx.tensor(w)))
        loss.backward()
        np.testing.assert_allclose(p.grad, fd_grad(loss_of, v.copy()), atol=1e-8)


# -- linear ------------------------------------------------------------------


class TestLinear:
    def test_identity(self):
        m = nx.LinearMap(nx.tensor(np.eye(3)), nx.tensor(np.zeros(3)))
        x = nx.tensor([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(nx.linear(x, m).data, x.data)

    def test_zero_map(self):
        m = nx.LinearMap(nx.tensor(np.zeros((2, 3))), nx.tensor(np.zeros(2)))
        out = nx.linear(nx.tensor([4.0, 5.0, 6.0]), m)
        np.testing.assert_array_equal(out.data, np.zeros(2))

    def test_matches_triple_loop(self, rng):
        w = rng.normal(size=(2, 4))
        b = rng.normal(size=2)
        x = rng.normal(size=(3, 4))
        m = nx.LinearMap(nx.tensor(w), nx.tensor(b))
        want = matmul_oracle(x, w.T) + b
        np.testing.assert_allclose(nx.linear(nx.tensor(x), m).data, want, atol=1e-12)

    def test_width_mismatch_raises(self):
        m = nx.LinearMap(nx.tensor(np.ones((2, 3))))
        with pytest.raises(nx.ShapeMismatch):
            nx.linear(nx.tensor(np.ones(4)), m)

    def test_bad_bias_shape_raises(self):
        with pytest.raises(nx.ShapeMismatch):
            nx.LinearMap(nx.tensor(np.ones((2, 3))), nx.tensor(np.ones(3)))


# -- attention ---------------------------------------------------------------


def random_attention(rng, d, heads):
    mk = lambda name: nx.LinearMap(
        nx.parameter(rng.normal(size=(d, d)) / math.sqrt(d), f"{name}.w"),
        nx.parameter(np.zeros(d), f"{name}.b"),
    )
    return nx.AttentionParams(mk("wq"), mk("wk"), mk("wv"), mk("wo"))


class TestMultiHeadAttention:
    def test_single_token_is_value_path(self, rng):
        # with one token the softmax weight is 1, so out = wo(wv(x))
        d = 8
        params = random_attention(rng, d, heads=2)
        x = nx.tensor(rng.normal(size=(1, d)))
        out = nx.multi_head_attention(x, params, heads=2)
        want = nx.linear(nx.linear(x, params.wv), params.wo)
        np.testing.assert_allclose(out.data, want.data, atol=1e-12)

    def test_matches_reference(self, rng):
        d, heads = 8, 2
        params = random_attention(rng, d, heads)
        x = rng.normal(size=(4, d))
        out = nx.multi_head_attention(nx.tensor(x), params, heads)
        want = attention_oracle(
            x,
            params.wq.weight.data,
            params.wk.weight.data,
            params.wv.weight.data,
            params.wo.weight.data,
            heads,
        )
        np.testing.assert_allclose(out.data, want, atol=1e-10)

    def test_permutation_equivariance(self, rng):
        d, heads = 8, 4
        params = random_attention(rng, d, heads)
        x = rng.normal(size=(6, d))
        perm = rng.permutation(6)
        out = nx.multi_head_attention(nx.tensor(x), params, heads).data
        out_p = nx.multi_head_attention(nx.tensor(x[perm]), params, heads).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)

    def test_width_not_divisible_raises(self, rng):
        params = random_attention(rng, 8, 2)
        with pytest.raises(nx.ShapeMismatch):
            nx.multi_head_attention(nx.tensor(rng.normal(size=(3, 8))), params, heads=3)

    def test_backward_runs_and_is_nonzero(self, rng):
        d, heads = 8, 2
        params = random_attention(rng, d, heads)
        x = nx.tensor(rng.normal(size=(4, d)))
        loss = nx.tsum(nx.multi_head_attention(x, params, heads))
        loss.backward()
        assert params.wq.weight.grad is not None
        assert np.abs(params.wq.weight.grad).max() > 0


# -- pooling -----------------------------------------------------------------


class TestMeanPool:
    def test_constant(self):
        out = nx.mean_pool(nx.tensor(np.ones((5, 3))), axis=0)
        np.testing.assert_array_equal(out.data, np.ones(3))

    def test_two_values(self):
        assert nx.mean_pool(nx.tensor([1.0, 3.0])).item() == 2.0

    def test_matches_sum_over_len(self, rng):
        x = rng.normal(size=(4, 4))
        out = nx.mean_pool(nx.tensor(x), axis=0)
        np.testing.assert_allclose(out.data, x.sum(axis=0) / 4.0, atol=1e-15)

    def test_backward_spreads_evenly(self):
        p = nx.parameter(np.arange(6.0).reshape(2, 3), "p")
        nx.tsum(nx.mean_pool(p, axis=0)).backward()
        np.testing.assert_allclose(p.grad, np.full((2, 3), 0.5))


# -- cross entropy -----------------------------------------------------------


class TestCrossEntropy:
    def test_uniform_is_log_a(self):
        loss = nx.cross_entropy(nx.tensor(np.zeros(4)), 1)
        assert abs(loss.item() - math.log(4.0)) < 1e-12

    def test_confident_score_drives_loss_down(self):
        s = np.zeros(4)
        s[2] = 20.0
        assert nx.cross_entropy(nx.tensor(s), 2).item() < 1e-6

    def test_matches_oracle(self, rng):
        s = rng.normal(size=5)
        loss = nx.cross_entropy(nx.tensor(s), 3)
        assert abs(loss.item() - cross_entropy_oracle(s, 3)) < 1e-12

    def test_loss_nonnegative(self, rng):
        for _ in range(20):
            s = rng.normal(size=6) * 3
            assert nx.cross_entropy(nx.tensor(s), 0).item() >= 0.0

    def test_label_out_of_range(self):
        with pytest.raises(nx.ShapeMismatch):
            nx.cross_entropy(nx.tensor(np.zeros(3)), 3)

    def test_backward_is_softmax_minus_onehot(self, rng):
        s = rng.normal(size=5)
        p = nx.parameter(s, "s")
        nx.cross_entropy(p, 2).backward()
        want = softmax_oracle(s)
        want[2] -= 1.0
        np.testing.assert_allclose(p.grad, want, atol=1e-12)


# -- graph mechanics ---------------------------------------------------------


class TestAutodiff:
    def test_purity_bitwise(self, rng):
        x = rng.normal(size=(3, 3))
        a = nx.softmax(nx.tensor(x), axis=-1).data
        b = nx.softmax(nx.tensor(x), axis=-1).data
        assert a.tobytes() == b.tobytes()

    def test_nonfinite_guard(self):
        big = nx.tensor(np.full(3, 1e308))
        with np.errstate(over="ignore"):
            with pytest.raises(nx.NonFiniteError):
                nx.mul(big, big)

    def test_nonfinite_at_creation(self):
        with pytest.raises(nx.NonFiniteError):
            nx.tensor([1.0, float("nan")])

    def test_no_grad_builds_no_tape(self, rng):
        p = nx.parameter(rng.normal(size=4), "p")
        with nx.no_grad():
            out = nx.tsum(nx.mul(p, p))
        assert not out.requires_grad
        assert out._bwd is None

    def test_grad_accumulates_across_uses(self):
        p = nx.parameter(np.array([2.0]), "p")
        loss = nx.tsum(nx.add(nx.mul(p, 3.0), nx.mul(p, p)))
        loss.backward()
        np.testing.assert_allclose(p.grad, [3.0 + 2.0 * 2.0])

    def test_gather_rows_scatter_adds(self):
        table = nx.parameter(np.arange(6.0).reshape(3, 2), "t")
        out = nx.gather_rows(table, [0, 0, 2])
        nx.tsum(out).backward()
        np.testing.assert_allclose(table.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_concat_rows_roundtrip_grad(self, rng):
        a = nx.parameter(rng.normal(size=(2, 3)), "a")
        b = nx.parameter(rng.normal(size=(4, 3)), "b")
        cat = nx.concat([a, b], axis=0)
        nx.tsum(nx.rows(cat, 1, 5)).backward()
        np.testing.assert_allclose(a.grad, [[0.0] * 3, [1.0] * 3])
        np.testing.assert_allclose(b.grad, [[1.0] * 3] * 3 + [[0.0] * 3])

    def test_layer_norm_statistics(self, rng):
        x = nx.tensor(rng.normal(size=(4, 8)) * 3 + 1)
        g = nx.tensor(np.ones(8))
        b = nx.tensor(np.zeros(8))
        out = nx.layer_norm(x, g, b).data
        np.testing.assert_allclose(out.mean(axis=-1), np.zeros(4), atol=1e-9)
        np.testing.assert_allclose(out.std(axis=-1), np.ones(4), atol=1e-3)


# -- MAC counting ------------------------------------------------------------


class TestMacCounter:
    def test_plain_matmul_count(self, rng):
        a = nx.tensor(rng.normal(size=(3, 4)))
        b = nx.tensor(rng.normal(size=(4, 5)))
        with nx.count_macs() as c:
            nx.matmul(a, b)
        assert c.total == 3 * 4 * 5

    def test_attention_count_closed_form(self, rng):
        n, d, heads = 6, 8, 2
        params = random_attention(rng, d, heads)
        x = nx.tensor(rng.normal(size=(n, d)))
        with nx.count_macs() as c:
            nx.multi_head_attention(x, params, heads)
        assert c.total == 4 * n * d * d + 2 * n * n * d

    def test_counter_nests(self, rng):
        a = nx.tensor(rng.normal(size=(2, 2)))
        with nx.count_macs() as outer:
            nx.matmul(a, a)
            with nx.count_macs() as inner:
                nx.matmul(a, a)
        assert inner.total == 8
        assert outer.total == 16


# -- grad_check --------------------------------------------------------------


class TestGradCheck:
    def test_quadratic_form(self, rng):
        w = nx.parameter(rng.normal(size=5), "w")

        def loss_fn():
            return nx.tsum(nx.mul(w, w))

        report = nx.grad_check(loss_fn, {"w": w}, eps=1e-6)
        assert report.max_rel_error < 1e-9
        assert report.passed(1e-4)

    def test_detects_corrupted_backward(self, rng):
        w = nx.parameter(rng.normal(size=4) + 2.0, "w")

        def loss_fn():
            # a deliberately wrong op: forward w**2, backward claims 3*w
            return nx._node(
                np.asarray((w.data ** 2).sum()),
                (w,),
                lambda g: nx._acc(w, g * 3.0 * w.data),
            )

        report = nx.grad_check(loss_fn, {"w": w}, eps=1e-6)
        assert report.max_rel_error > 0.3
        assert not report.passed(1e-4)
        assert report.worst_param == "w"

    def test_rejects_nondeterministic_loss(self):
        w = nx.parameter(np.ones(2), "w")
        state = {"calls": 0}

        def loss_fn():
            state["calls"] += 1
            return nx.tsum(nx.mul(w, float(state["calls"])))

        with pytest.raises(ValueError):
            nx.grad_check(loss_fn, {"w": w})

    def test_composite_graph(self, rng):
        w = nx.parameter(rng.normal(size=(3, 3)), "w")
        x = nx.tensor(rng.normal(size=(2, 3)))

        def loss_fn():
            h = nx.matmul(x, w)
            return nx.cross_entropy(nx.reshape(nx.mean_pool(h, axis=0), (3,)), 1)

        report = nx.grad_check(loss_fn, {"w": w}, eps=1e-6)
        assert report.max_rel_error < 1e-6
