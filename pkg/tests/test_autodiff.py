import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from timexer import autodiff as ad
from timexer.errors import ContractError, ShapeError


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar f at array x (independent of the tape)."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, gflat = x.ravel(), out.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return out


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / (np.abs(a) + np.abs(b) + 1e-12)))


def tape_grads(f, **arrays):
    with ad.Tape() as tape:
        loss = f(**{k: ad.parameter(v, k) for k, v in arrays.items()})
    return ad.backward(loss, tape)


class TestMatmul:
    def test_identity(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(np.eye(2), x).data, x)

    def test_hand_arithmetic(self):
        assert ad.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_gradient_vs_finite_differences(self, rng):
        a, b, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
        grads = tape_grads(lambda a, b: ad.sum((a @ b) * w), a=a, b=b)
        assert rel_err(grads["a"], numeric_grad(lambda x: np.sum((x @ b) * w), a)) < 1e-6
        assert rel_err(grads["b"], numeric_grad(lambda x: np.sum((a @ x) * w), b)) < 1e-6

    def test_batched_broadcast(self, rng):
        a, b = rng.normal(size=(5, 3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(ad.matmul(a, b).data, a @ b)
        grads = tape_grads(lambda a, b: ad.sum(a @ b), a=a, b=b)
        assert grads["b"].shape == (4, 2)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\[2, 3\].*\[4, 2\]"):
            ad.matmul(np.ones((2, 3)), np.ones((4, 2)))


class TestLayerNorm:
    def test_constant_vector(self):
        out = ad.layer_norm(np.full(3, 5.0), np.ones(3), np.zeros(3)).data
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_symmetric_pair(self):
        out = ad.layer_norm(np.array([0.0, 2.0]), np.ones(2), np.zeros(2), eps=1e-12).data
        np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-9)

    def test_gradient(self, rng):
        x, g, b, w = rng.normal(size=(4, 8)), rng.normal(size=8), rng.normal(size=8), rng.normal(size=(4, 8))

        def f(x, g, b):
            return ad.sum(ad.layer_norm(x, g, b) * w)

        def ref(x, g=g, b=b):
            mu = x.mean(-1, keepdims=True)
            var = x.var(-1, keepdims=True)
            return np.sum(((x - mu) / np.sqrt(var + 1e-5) * g + b) * w)

        grads = tape_grads(f, x=x, g=g, b=b)
        assert rel_err(grads["x"], numeric_grad(ref, x)) < 1e-5
        assert rel_err(grads["g"], numeric_grad(lambda gg: ref(x, gg, b), g)) < 1e-5
        assert rel_err(grads["b"], numeric_grad(lambda bb: ref(x, g, bb), b)) < 1e-5

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            ad.layer_norm(np.ones((2, 3)), np.ones(4), np.zeros(4))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.softmax_lastdim(np.zeros(3)).data, 1 / 3)

    def test_no_overflow(self):
        np.testing.assert_allclose(ad.softmax_lastdim(np.array([1000.0, 0.0])).data, [1.0, 0.0], atol=1e-12)

    def test_direct_evaluation(self):
        out = ad.softmax_lastdim(np.array([1.0, 2.0, 3.0])).data
        np.testing.assert_allclose(out, [0.0900, 0.2447, 0.6652], atol=1e-4)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-50, 50)))
    def test_rows_are_distributions(self, x):
        out = ad.softmax_lastdim(x).data
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)

    def test_gradient(self, rng):
        x, w = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))

        def ref(x):
            e = np.exp(x - x.max(-1, keepdims=True))
            return np.sum(e / e.sum(-1, keepdims=True) * w)

        grads = tape_grads(lambda x: ad.sum(ad.softmax_lastdim(x) * w), x=x)
        assert rel_err(grads["x"], numeric_grad(ref, x)) < 1e-5


class TestOtherOps:
    @pytest.mark.parametrize("op, ref", [
        (lambda x: ad.gelu(x), None),
        (lambda x: ad.reshape(x, (6, 2)), lambda x: x.reshape(6, 2)),
        (lambda x: ad.swapaxes(x, 0, 1), lambda x: x.swapaxes(0, 1)),
        (lambda x: x[1:, ::2], lambda x: x[1:, ::2]),
        (lambda x: x[[0, 0, 2]], lambda x: x[[0, 0, 2]]),
        (lambda x: ad.mean(x, axis=0, keepdims=True), lambda x: x.mean(0, keepdims=True)),
        (lambda x: ad.concat([x, x * 2.0], axis=1), lambda x: np.concatenate([x, 2 * x], 1)),
        (lambda x: (x - 1.0) / 3.0, lambda x: (x - 1.0) / 3.0),
    ])
    def test_gradient(self, rng, op, ref):
        if ref is None:
            erf = np.vectorize(math.erf)

            def ref(x):
                return 0.5 * x * (1 + erf(x / np.sqrt(2)))
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=ref(x).shape)
        grads = tape_grads(lambda x: ad.sum(op(x) * w), x=x)
        assert rel_err(grads["x"], numeric_grad(lambda y: np.sum(ref(y) * w), x)) < 1e-5

    def test_dropout_identity_without_rng(self, rng):
        x = ad.tensor(rng.normal(size=(4, 4)))
        assert ad.dropout(x, 0.5, None) is x

    def test_dropout_keeps_expectation(self):
        out = ad.dropout(ad.tensor(np.ones(20000)), 0.25, np.random.default_rng(0)).data
        assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
        assert abs(out.mean() - 1.0) < 0.03


class TestBackward:
    def test_linear(self):
        assert tape_grads(lambda w: ad.sum(w), w=np.zeros((2, 3)))["w"].tolist() == np.ones((2, 3)).tolist()

    def test_quadratic(self):
        assert tape_grads(lambda w: ad.sum(w * w), w=np.array([1.0, -2.0]))["w"].tolist() == [2.0, -4.0]

    def test_accumulates_reuse(self):
        grads = tape_grads(lambda w: ad.sum(w * 3.0 + w * w), w=np.array([2.0]))
        assert grads["w"].tolist() == [7.0]

    def test_unreached_parameter_absent(self):
        with ad.Tape() as tape:
            a, _ = ad.parameter(np.ones(2), "a"), ad.parameter(np.ones(2), "b")
            loss = ad.sum(a)
        assert set(ad.backward(loss, tape)) == {"a"}

    def test_second_backward_rejected(self):
        with ad.Tape() as tape:
            loss = ad.sum(ad.parameter(np.ones(2), "w"))
        ad.backward(loss, tape)
        with pytest.raises(ContractError):
            ad.backward(loss, tape)

    def test_non_scalar_loss_rejected(self):
        with ad.Tape() as tape:
            out = ad.parameter(np.ones(2), "w") * 2.0
        with pytest.raises(ContractError, match="0-dimensional"):
            ad.backward(out, tape)

    def test_loss_from_other_tape_rejected(self):
        with ad.Tape():
            loss = ad.sum(ad.parameter(np.ones(2), "w"))
        with ad.Tape() as other:
            pass
        with pytest.raises(ContractError):
            ad.backward(loss, other)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, 5, elements=st.floats(-10, 10)), st.floats(-3, 3))
    def test_gradient_is_linear_in_loss(self, w, k):
        g1 = tape_grads(lambda w: ad.sum(w * w), w=w)["w"]
        gk = tape_grads(lambda w: ad.sum(w * w) * k, w=w)["w"]
        np.testing.assert_allclose(gk, k * g1, atol=1e-9)

    def test_identity_matmul_bitwise(self, rng):
        x = np.round(rng.normal(size=(4, 4)) * 8) / 8
        assert np.array_equal(ad.matmul(np.eye(4), x).data, x)


class TestGradCheck:
    def test_sum(self, rng):
        assert ad.grad_check(lambda p: ad.sum(p["w"]), {"w": rng.normal(size=(3, 2))}) < 1e-10

    def test_layer_norm_composite(self, rng):
        params = {"x": rng.normal(size=(2, 6)), "g": rng.normal(size=6), "b": rng.normal(size=6)}
        w = rng.normal(size=(2, 6))

        def f(p):
            return ad.sum(ad.layer_norm(p["x"], p["g"], p["b"]) * w)

        assert ad.grad_check(f, params) < 1e-5

    @pytest.mark.parametrize("eps", [1e-8, 1e-2])
    def test_eps_range(self, eps):
        with pytest.raises(ContractError):
            ad.grad_check(lambda p: ad.sum(p["w"]), {"w": np.ones(2)}, eps=eps)

    def test_nondeterministic_rejected(self):
        rng = np.random.default_rng(0)

        def f(p):
            return ad.sum(ad.dropout(p["w"], 0.5, rng))

        with pytest.raises(ContractError):
            ad.grad_check(f, {"w": np.arange(1.0, 65.0)})
