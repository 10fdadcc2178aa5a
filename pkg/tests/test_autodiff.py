"""Autodiff engine tests: finite-difference oracles, graph semantics, errors."""

import numpy as np
import pytest

import amp.autodiff as ad
from amp.autodiff import Tensor
from amp.errors import ContractError, ParameterError, ShapeError, StateError


def finite_diff(f, x, eps=1e-6):
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def check_grad(op, *arrays, tol=1e-6):
    """Compare analytic grads of sum(op(...)) against central differences."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = ad.tensor_sum(op(*tensors))
    ad.backward(out)
    for i, (t, a) in enumerate(zip(tensors, arrays)):
        def f(x, i=i):
            args = [Tensor(arr) for arr in arrays]
            args[i] = Tensor(x)
            return ad.tensor_sum(op(*args)).item()
        num = finite_diff(f, np.array(a))
        scale = np.maximum(np.abs(num), 1.0)
        assert np.max(np.abs(t.grad - num) / scale) < tol, f"operand {i} of {op}"


RNG = np.random.default_rng(0)
A23 = RNG.normal(size=(2, 3))
B23 = RNG.normal(size=(2, 3)) + 3.0    # offset keeps log/sqrt/div well-posed
A234 = RNG.normal(size=(2, 3, 4))


class TestFiniteDifferences:
    def test_add(self):
        check_grad(ad.add, A23, B23)

    def test_sub(self):
        check_grad(ad.sub, A23, B23)

    def test_mul(self):
        check_grad(ad.mul, A23, B23)

    def test_div(self):
        check_grad(ad.div, A23, B23)

    def test_scale(self):
        check_grad(lambda a: ad.scale(a, -2.5), A23)

    def test_exp(self):
        check_grad(ad.exp, A23)

    def test_log(self):
        check_grad(ad.log, B23)

    def test_sqrt(self):
        check_grad(ad.sqrt, B23)

    def test_gelu(self):
        check_grad(ad.gelu, 3.0 * A23)

    def test_softmax(self):
        check_grad(lambda a: ad.mul(ad.softmax(a, axis=1), Tensor(B23)), A23)

    def test_softmax_temperature(self):
        check_grad(lambda a: ad.mul(ad.softmax(a, axis=1, temperature=0.25),
                                    Tensor(B23)), A23)

    def test_sum_axis(self):
        check_grad(lambda a: ad.mul(ad.tensor_sum(a, axis=1), Tensor(B23[:, 0])),
                   A23)

    def test_mean(self):
        check_grad(lambda a: ad.scale(ad.tensor_mean(a, axis=(0, 2)), 2.0), A234)

    def test_reshape_transpose(self):
        check_grad(lambda a: ad.mul(ad.transpose(ad.reshape(a, (3, 2)), (1, 0)),
                                    Tensor(B23)), A23)

    def test_broadcast_to(self):
        check_grad(lambda a: ad.mul(ad.broadcast_to(a, (2, 3)), Tensor(B23)),
                   A23[:1, :])

    def test_getitem(self):
        check_grad(lambda a: ad.mul(a[0, 1:], Tensor(B23[0, 1:])), A23)

    def test_concat(self):
        check_grad(lambda a, b: ad.mul(ad.concat([a, b], axis=0),
                                       Tensor(np.vstack([B23, B23]))), A23, A23 + 1)

    def test_matmul(self):
        check_grad(ad.matmul, RNG.normal(size=(2, 3)), RNG.normal(size=(3, 4)))

    def test_matmul_batched(self):
        check_grad(ad.matmul, RNG.normal(size=(2, 2, 3)), RNG.normal(size=(2, 3, 2)))

    def test_layernorm(self):
        x = RNG.normal(size=(2, 4))
        g = RNG.normal(size=4) + 1.0
        b = RNG.normal(size=4)
        w = RNG.normal(size=(2, 4))
        check_grad(lambda x, g, b: ad.mul(ad.layernorm(x, g, b), Tensor(w)),
                   x, g, b, tol=1e-5)


class TestBroadcasting:
    def test_scalar_and_size_one_axes(self):
        a = Tensor(A23, requires_grad=True)
        col = Tensor(np.ones((2, 1)), requires_grad=True)
        out = ad.tensor_sum(a * col * 2.0)
        ad.backward(out)
        assert a.grad.shape == (2, 3)
        assert col.grad.shape == (2, 1)
        np.testing.assert_allclose(col.grad[:, 0], 2.0 * A23.sum(axis=1))

    def test_rank_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_incompatible_shape_rejected(self):
        with pytest.raises(ShapeError):
            ad.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))

    def test_matmul_shape_rejected(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestGraphSemantics:
    def test_backward_requires_scalar(self):
        t = Tensor(A23, requires_grad=True)
        with pytest.raises(ContractError):
            ad.backward(t * 2.0)

    def test_repeated_backward_does_not_accumulate(self):
        t = Tensor(A23, requires_grad=True)
        out = ad.tensor_sum(t * t)
        ad.backward(out)
        first = np.array(t.grad)
        ad.backward(out)
        np.testing.assert_array_equal(t.grad, first)

    def test_diamond_graph_accumulates_within_one_pass(self):
        t = Tensor(np.array([2.0]), requires_grad=True)
        out = ad.tensor_sum(t * 3.0 + t * t)   # d/dt = 3 + 2t = 7
        ad.backward(out)
        np.testing.assert_allclose(t.grad, [7.0])

    def test_no_grad_blocks_recording(self):
        t = Tensor(A23, requires_grad=True)
        with ad.no_grad():
            out = t * 2.0
        assert not out.requires_grad and out._backward is None

    def test_deep_chain_iterative_toposort(self):
        t = Tensor(np.array([1.0]), requires_grad=True)
        out = t
        for _ in range(5000):
            out = out + 1.0
        ad.backward(ad.tensor_sum(out))
        np.testing.assert_allclose(t.grad, [1.0])

    def test_softmax_bad_temperature(self):
        with pytest.raises(ParameterError):
            ad.softmax(Tensor(A23), temperature=0.0)


class TestCaptureHandle:
    def test_grad_before_backward_raises(self):
        t = Tensor(A23, requires_grad=True)
        h = ad.capture_intermediate(t * 2.0)
        with pytest.raises(StateError):
            h.grad

    def test_grad_after_backward(self):
        t = Tensor(A23, requires_grad=True)
        mid = t * 3.0
        h = ad.capture_intermediate(mid)
        ad.backward(ad.tensor_sum(mid))
        np.testing.assert_allclose(h.grad, np.ones_like(A23))
        np.testing.assert_allclose(h.value, 3.0 * A23)

    def test_unreached_branch_reads_zero(self):
        t = Tensor(A23, requires_grad=True)
        branch = t * 5.0                      # never feeds the root
        h = ad.capture_intermediate(branch)
        ad.backward(ad.tensor_sum(t * 2.0))
        np.testing.assert_array_equal(h.grad, np.zeros_like(A23))
