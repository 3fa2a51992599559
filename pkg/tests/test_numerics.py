import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxsmooth.numerics import (Adam, AdamState, EnsembleMlp, Mlp, Parameter,
                                RngStream, Tensor, adam_step, concat,
                                layer_norm, minimum, mlp_forward,
                                sinusoidal_embedding)

from util import finite_diff_grad, rel_err


class TestRngStream:
    def test_same_seed_same_draws(self):
        a = RngStream(7, 3).standard_normal(100)
        b = RngStream(7, 3).standard_normal(100)
        assert np.array_equal(a, b)

    def test_distinct_streams_differ(self):
        a = RngStream(7, 0).standard_normal(100)
        b = RngStream(7, 1).standard_normal(100)
        assert not np.array_equal(a, b)

    def test_derive_is_deterministic_and_distinct(self):
        r = RngStream(11, 2)
        c1 = r.derive(5)
        c2 = RngStream(11, 2).derive(5)
        assert (c1.seed, c1.stream_id) == (c2.seed, c2.stream_id)
        assert c1.stream_id != r.derive(6).stream_id
        assert np.array_equal(c1.standard_normal(10), c2.standard_normal(10))

    def test_sibling_streams_uncorrelated(self):
        r = RngStream(3)
        x = r.derive(0).standard_normal(20000)
        y = r.derive(1).standard_normal(20000)
        assert abs(np.corrcoef(x, y)[0, 1]) < 0.03

    def test_normal_moments(self):
        x = RngStream(0).standard_normal(200000)
        assert abs(x.mean()) < 0.01
        assert abs(x.std() - 1.0) < 0.01

    def test_negative_seed_rejected(self):
        with pytest.raises(ValueError):
            RngStream(-1)


_UNARY_REF = {
    "exp": np.exp,
    "log": np.log,
    "tanh": np.tanh,
    "relu": lambda x: np.maximum(x, 0.0),
    "mish": lambda x: x * np.tanh(np.logaddexp(0.0, x)),
    "softplus": lambda x: np.logaddexp(0.0, x),
    "square": np.square,
}


class TestTensorOps:
    def test_add_broadcast_grads(self):
        rng = RngStream(1)
        w = Parameter(rng.standard_normal((3, 4)))
        b = Parameter(rng.standard_normal(4))
        x = rng.standard_normal((5, 3))

        def build():
            return ((Tensor(x) @ w + b) * (Tensor(x) @ w + b)).sum()

        loss = build()
        loss.backward()
        fd_w = finite_diff_grad(lambda: build().item(), w)
        fd_b = finite_diff_grad(lambda: build().item(), b)
        assert rel_err(w.grad, fd_w) < 1e-6
        assert rel_err(b.grad, fd_b) < 1e-6

    def test_batched_matmul_grads(self):
        rng = RngStream(2)
        w = Parameter(rng.standard_normal((5, 3, 2)))
        x = rng.standard_normal((4, 3))

        def value():
            return float((np.matmul(x, w.data) ** 2).sum())

        out = (Tensor(x) @ w).square().sum()
        out.backward()
        fd = finite_diff_grad(value, w)
        assert rel_err(w.grad, fd) < 1e-6

    @pytest.mark.parametrize("op", ["exp", "log", "tanh", "relu", "mish",
                                    "softplus", "square"])
    def test_unary_grads(self, op):
        rng = RngStream(hash(op) % 1000)
        base = rng.standard_normal((6,)) * 0.8
        if op == "log":
            base = np.abs(base) + 0.5
        p = Parameter(base)

        def build():
            return getattr(p, op)().sum()

        build().backward()
        ref = _UNARY_REF[op]
        fd = finite_diff_grad(lambda: float(ref(p.data).sum()), p)
        assert rel_err(p.grad, fd) < 1e-5

    def test_ndarray_left_operand_defers_to_tensor(self):
        # numpy must not absorb the Tensor into an object array
        p = Parameter(np.array([1.0, 2.0, 3.0]))
        c = np.array([10.0, 20.0, 30.0])
        out = (c - p) + c * p
        assert isinstance(out, Tensor)
        assert out.data.dtype == np.float64
        out.sum().backward()
        assert np.allclose(out.data, c - p.data + c * p.data)
        assert np.allclose(p.grad, c - 1.0)

    def test_softplus_extreme_inputs_stay_finite(self):
        p = Parameter(np.array([-800.0, -30.0, 0.0, 30.0, 800.0]))
        with np.errstate(over="raise", invalid="raise"):
            out = p.softplus()
            out.sum().backward()
        assert np.allclose(out.data, [0.0, 0.0, np.log(2.0), 30.0, 800.0])
        assert np.all(np.isfinite(p.grad))
        assert np.allclose(p.grad, [0.0, 0.0, 0.5, 1.0, 1.0], atol=1e-12)

    def test_minimum_and_concat_grads(self):
        rng = RngStream(5)
        a = Parameter(rng.standard_normal((4, 3)))
        b = Parameter(rng.standard_normal((4, 3)))

        def value():
            both = np.concatenate([np.minimum(a.data, b.data), a.data], axis=-1)
            return float((both ** 2).sum())

        loss = concat([minimum(a, b), a], axis=-1).square().sum()
        loss.backward()
        assert rel_err(a.grad, finite_diff_grad(value, a)) < 1e-6
        assert rel_err(b.grad, finite_diff_grad(value, b)) < 1e-6

    def test_layer_norm_grads(self):
        rng = RngStream(6)
        x = Parameter(rng.standard_normal((3, 8)))
        g = Parameter(np.ones(8) * 1.3)
        b = Parameter(rng.standard_normal(8) * 0.1)

        def value():
            mu = x.data.mean(axis=-1, keepdims=True)
            var = x.data.var(axis=-1, keepdims=True)
            xhat = (x.data - mu) / np.sqrt(var + 1e-6)
            return float(((xhat * g.data + b.data) ** 2).sum())

        layer_norm(x, g, b).square().sum().backward()
        for p in (x, g, b):
            assert rel_err(p.grad, finite_diff_grad(value, p)) < 1e-5

    def test_index0_grad_routes_to_one_member(self):
        w = Parameter(np.arange(12.0).reshape(3, 2, 2))
        (w.index0(1) * 2.0).sum().backward()
        assert np.all(w.grad[0] == 0) and np.all(w.grad[2] == 0)
        assert np.all(w.grad[1] == 2.0)

    def test_mean_matches_manual(self):
        p = Parameter(np.array([1.0, 2.0, 3.0, 4.0]))
        p.mean().backward()
        assert np.allclose(p.grad, 0.25)

    def test_double_backward_raises(self):
        p = Parameter(np.ones(3))
        loss = p.square().sum()
        loss.backward()
        with pytest.raises(RuntimeError):
            loss.backward()

    def test_reusing_consumed_node_raises(self):
        p = Parameter(np.ones(3))
        mid = p.square()
        mid.sum().backward()
        with pytest.raises(RuntimeError):
            (mid * 2.0).sum().backward()

    def test_backward_requires_scalar(self):
        p = Parameter(np.ones(3))
        with pytest.raises(ValueError):
            p.square().backward()

    def test_grad_accumulates_across_graphs(self):
        p = Parameter(np.ones(2))
        p.sum().backward()
        p.sum().backward()
        assert np.allclose(p.grad, 2.0)

    def test_constants_get_no_grad(self):
        c = Tensor(np.ones(3))
        p = Parameter(np.ones(3))
        (c * p).sum().backward()
        assert c.grad is None


class TestMlp:
    def test_forward_matches_np_path(self):
        rng = RngStream(9)
        net = Mlp([5, 16, 16, 3], rng, activation="mish")
        x = rng.standard_normal((7, 5))
        assert np.array_equal(net(x).data, net.forward_np(x))

    def test_mlp_gradcheck(self):
        rng = RngStream(10)
        net = Mlp([4, 8, 2], rng, activation="tanh")
        x = rng.standard_normal((3, 4))
        t = rng.standard_normal((3, 2))

        def value():
            return float(((net.forward_np(x) - t) ** 2).mean())

        ((net(x) - Tensor(t)).square()).mean().backward()
        for p in net.params:
            assert rel_err(p.grad, finite_diff_grad(value, p)) < 1e-5

    def test_mlp_forward_functional(self):
        rng = RngStream(11)
        net = Mlp([3, 6, 2], rng)
        x = rng.standard_normal((4, 3))
        out = mlp_forward(net.params, Tensor(x), net.activation)
        assert np.array_equal(out.data, net.forward_np(x))

    def test_bad_activation_rejected(self):
        with pytest.raises(ValueError):
            Mlp([2, 2], RngStream(0), activation="selu")

    def test_deterministic_init(self):
        a = Mlp([3, 4, 1], RngStream(5, 7))
        b = Mlp([3, 4, 1], RngStream(5, 7))
        for pa, pb in zip(a.params, b.params):
            assert np.array_equal(pa.data, pb.data)


class TestEnsembleMlp:
    def test_graph_matches_np_and_member(self):
        rng = RngStream(12)
        ens = EnsembleMlp(5, [6, 12, 12, 1], rng)
        x = rng.standard_normal((4, 6))
        full = ens(x).data
        assert full.shape == (5, 4, 1)
        assert np.allclose(full, ens.forward_np(x))
        for i in range(5):
            member = ens.member(i, Tensor(x)).data
            assert np.allclose(member, full[i], atol=1e-12)

    def test_ensemble_gradcheck(self):
        rng = RngStream(13)
        ens = EnsembleMlp(3, [4, 6, 1], rng, use_layer_norm=True)
        x = rng.standard_normal((5, 4))
        y = rng.standard_normal((3, 5, 1))

        def value():
            return float(((ens.forward_np(x) - y) ** 2).mean())

        ((ens(x) - Tensor(y)).square()).mean().backward()
        for p in ens.params:
            assert rel_err(p.grad, finite_diff_grad(value, p)) < 1e-5


class TestAdam:
    def test_first_step_magnitude(self):
        p = Parameter(np.zeros(4))
        p.grad = np.ones(4)
        state = AdamState(p.data.shape)
        adam_step(state, p, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                  weight_decay=0.0)
        assert np.all(np.abs(p.data + 1e-3) < 1e-8)
        assert np.all(p.grad == 0.0)

    def test_decoupled_weight_decay(self):
        p = Parameter(np.full(3, 2.0))
        p.grad = np.zeros(3)
        state = AdamState(p.data.shape)
        adam_step(state, p, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8,
                  weight_decay=0.01)
        assert np.allclose(p.data, 2.0 * (1 - 0.1 * 0.01))

    def test_nonfinite_gradient_raises(self):
        p = Parameter(np.zeros(2))
        p.grad = np.array([np.nan, 0.0])
        with pytest.raises(FloatingPointError):
            adam_step(AdamState(p.data.shape), p, 1e-3, 0.9, 0.999, 1e-8, 0.0)

    def test_optimizer_descends_quadratic(self):
        p = Parameter(np.array([5.0, -3.0]))
        opt = Adam([p], lr=0.1)
        for _ in range(400):
            loss = p.square().sum()
            loss.backward()
            opt.step()
        assert np.all(np.abs(p.data) < 1e-2)


class TestSinusoidalEmbedding:
    def test_shape_and_range(self):
        e = sinusoidal_embedding(np.linspace(0, 1, 11), 32)
        assert e.shape == (11, 32)
        assert np.all(np.abs(e) <= 1.0)

    def test_distinct_inputs_distinct_embeddings(self):
        e = sinusoidal_embedding(np.array([0.0, 0.1, 0.5, 1.0]), 16)
        for i in range(4):
            for j in range(i + 1, 4):
                assert not np.allclose(e[i], e[j])

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            sinusoidal_embedding(np.array([0.5]), 7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 6), st.integers(1, 5))
def test_matmul_grad_property(seed, n, m):
    rng = RngStream(seed % 10000)
    a = Parameter(rng.standard_normal((n, m)))
    b = Parameter(rng.standard_normal((m, n)))
    (Tensor(rng.standard_normal((2, n))) @ a @ b).square().mean().backward()

    def value():
        x = RngStream(seed % 10000)
        x.standard_normal((n, m)); x.standard_normal((m, n))
        probe = x.standard_normal((2, n))
        return float(((probe @ a.data @ b.data) ** 2).mean())

    assert rel_err(a.grad, finite_diff_grad(value, a)) < 1e-4
    assert rel_err(b.grad, finite_diff_grad(value, b)) < 1e-4
