import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dt4ecg import autodiff as ad
from dt4ecg import nn
from dt4ecg.autodiff import GraphError, ShapeError, Tensor


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


class TestForward:
    def test_mul_identity(self):
        out = ad.mul(t64([1, 2, 3]), t64([1, 1, 1]))
        np.testing.assert_array_equal(out.data, [1, 2, 3])

    def test_add_zero(self):
        np.testing.assert_array_equal(ad.add(t64([0, 0]), t64([0, 0])).data, [0, 0])

    def test_mul_elementwise(self):
        np.testing.assert_array_equal(ad.mul(t64([2, 3]), t64([4, 5])).data, [8, 15])

    def test_graph_linked_only_when_required(self):
        a = t64([1.0], grad=False)
        assert ad.mul(a, a).node is None
        assert ad.mul(a, t64([2.0])).node is not None

    def test_no_grad_builds_no_graph(self):
        with ad.no_grad():
            out = ad.mul(t64([1.0]), t64([2.0]))
        assert out.node is None and not out.requires_grad

    def test_channel_gate_broadcast(self):
        x = t64(np.ones((2, 3, 4)))
        gate = t64(np.arange(6.0).reshape(2, 3, 1))
        assert ad.mul(x, gate).shape == (2, 3, 4)
        time_gate = t64(np.ones((2, 1, 4)))
        assert ad.mul(x, time_gate).shape == (2, 3, 4)

    @pytest.mark.parametrize("shape", [(2, 3), (2, 1, 1), (1, 3, 4), (3,)])
    def test_general_broadcast_rejected(self, shape):
        with pytest.raises(ShapeError, match="mul"):
            ad.mul(t64(np.ones((2, 3, 4))), t64(np.ones(shape)))


class TestBackward:
    def test_sum_grad(self):
        x = t64([1, 2, 3])
        ad.sum(x).backward()
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_square_grad(self):
        x = t64([3.0])
        ad.sum(x * x).backward()
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_sigmoid_grad_at_zero(self):
        x = t64(0.0)
        nn.sigmoid(x).backward()
        assert x.grad == pytest.approx(0.25)

    def test_non_scalar_rejected(self):
        x = t64([1.0, 2.0])
        with pytest.raises(GraphError, match="scalar"):
            (x * 2.0).backward()

    def test_second_backward_through_freed_graph_rejected(self):
        x = t64([1.0, 2.0])
        loss = ad.sum(x * x)
        loss.backward()
        with pytest.raises(GraphError, match="freed"):
            loss.backward()

    def test_retain_graph_allows_repeat_and_accumulates(self):
        x = t64([1.0, 2.0])
        loss = ad.sum(x * x)
        loss.backward(retain_graph=True)
        loss.backward()
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])

    def test_fan_out_accumulates(self):
        x = t64([0.3, -1.2])
        y = nn.sigmoid(x)
        ad.sum(y * y + y).backward()
        s = 1 / (1 + np.exp(-x.data))
        np.testing.assert_allclose(x.grad, (2 * s + 1) * s * (1 - s), rtol=1e-12)

    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
    @settings(max_examples=30, deadline=None)
    def test_fan_out_linearity(self, a, b, seed):
        xv = np.random.default_rng(seed).uniform(-2, 2, 5)

        def grad_of(fn):
            x = t64(xv)
            fn(x).backward()
            return x.grad

        f = lambda x: ad.sum(nn.sigmoid(x) * x)  # noqa: E731
        combined = grad_of(lambda x: f(x) * a + f(x) * b)
        np.testing.assert_allclose(combined, (a + b) * grad_of(f), rtol=1e-10, atol=1e-12)

    def test_grad_restricted_matches_full(self):
        rng = np.random.default_rng(1)
        w1, w2 = t64(rng.normal(size=(3, 4))), t64(rng.normal(size=(2, 3)))
        x = t64(rng.normal(size=(5, 4)), grad=False)
        loss = ad.sum(nn.sigmoid(nn.linear(nn.relu(nn.linear(x, w1)), w2)))
        (g2,) = ad.grad(loss, [w2], retain_graph=True)
        assert w2.grad is None
        loss.backward()
        np.testing.assert_array_equal(g2, w2.grad)

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(5)
            x = Tensor(rng.normal(size=(2, 3, 8)).astype(np.float32), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 3, 3)).astype(np.float32), requires_grad=True)
            out = ad.sum(nn.relu(nn.conv1d(x, w, padding=1)))
            out.backward()
            return out.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

        assert run() == run()


class TestGradcheck:
    def test_linear_function_exact(self):
        rep = ad.gradcheck(ad.sum, np.random.default_rng(0).normal(size=6))
        assert rep.max_rel_error < 1e-9 and rep.passed

    @pytest.mark.parametrize("seed", range(10))
    def test_sum_sigmoid(self, seed):
        x = np.random.default_rng(seed).uniform(-2, 2, 7)
        rep = ad.gradcheck(lambda t: ad.sum(nn.sigmoid(t)), x, eps=1e-5, tol=1e-5)
        assert rep.passed, rep.max_rel_error

    def test_non_finite_named(self):
        with pytest.raises(ad.NonFiniteError, match="mul"):
            ad.gradcheck(lambda t: ad.sum(t * np.inf), np.ones(2))

    def test_detects_wrong_gradient(self):
        def bad(t):
            return ad._make(np.asarray(float(np.sum(t.data ** 2))), "bad", (t,), lambda g: (g * t.data,))

        rep = ad.gradcheck(bad, np.array([1.0, 2.0]))
        assert not rep.passed
