import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miqa import autodiff as ad
from miqa.autodiff import Graph, Tensor

from .op_cases import OP_CASES, random_case


def test_identity_graph_returns_input_bitwise(rng):
    t = Tensor(rng.standard_normal((3, 4)).astype(np.float32))
    g = Graph(lambda x: x)
    out = ad.forward(g, [t])
    assert out.data.tobytes() == t.data.tobytes()


def test_sum_of_ones():
    g = Graph(lambda x: x.sum())
    assert ad.forward(g, [Tensor(np.ones((2, 2)))]).item() == 4.0


def test_two_layer_linear_net_matches_hand_products():
    x = np.array([[1.0, 2.0]], dtype=np.float32)
    w1 = np.array([[1.0, -1.0, 0.5], [2.0, 0.0, 1.0]], dtype=np.float32)
    w2 = np.array([[1.0], [3.0], [-2.0]], dtype=np.float32)
    # x @ w1 = [1+4, -1+0, 0.5+2] = [5, -1, 2.5]; @ w2 = 5 - 3 - 5 = -3
    g = Graph(lambda t: ad.matmul(ad.matmul(t, Tensor(w1)), Tensor(w2)))
    assert ad.forward(g, [Tensor(x)]).data.tolist() == [[-3.0]]


def test_forward_rejects_declared_shape_mismatch():
    g = Graph(lambda x: x.sum(), input_shapes=[(2, 2)], name="sig")
    with pytest.raises(ad.ShapeError, match=r"input\[0\]"):
        g.forward(Tensor(np.ones((3, 2))))


def test_op_shape_mismatch_names_node():
    def fn(x):
        y = ad.relu(x)
        return ad.matmul(y, Tensor(np.ones((5, 1))))

    g = Graph(fn)
    with pytest.raises(ad.ShapeError, match=r"node #1 \(matmul\)"):
        g.forward(Tensor(np.ones((2, 3))))


def test_backward_of_sum_is_ones(rng):
    t = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    g = Graph(lambda x: x.sum())
    g.backward(g.forward(t))
    assert np.array_equal(t.grad, np.ones((2, 3, 4), dtype=np.float32))


def test_scalar_squared_error_gradient():
    w = Tensor(np.array([2.0]), requires_grad=True)

    def fn(x):
        return ad.mse(ad.mul(w, x), Tensor(np.array([5.0])))

    g = Graph(fn)
    g.backward(g.forward(Tensor(np.array([3.0]))))
    # dL/dw = 2 (w x - y) x = 2 * 1 * 3
    assert w.grad.tolist() == [6.0]


def test_backward_before_forward_rejected():
    g = Graph(lambda x: x.sum())
    with pytest.raises(ad.BackwardError):
        ad.backward(g, None)
    with pytest.raises(ad.BackwardError, match="before forward"):
        g.backward()


def test_non_scalar_loss_rejected():
    t = Tensor(np.ones((2, 2)), requires_grad=True)
    g = Graph(lambda x: ad.relu(x))
    out = g.forward(t)
    with pytest.raises(ad.BackwardError, match="scalar"):
        g.backward(out)


def test_input_gradients_when_flagged(rng):
    x = Tensor(rng.standard_normal((1, 6, 6, 2)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 3, 2, 4)))
    g = Graph(lambda t: ad.global_avg_pool(ad.conv2d(t, w, 1, 1)).sum())
    g.backward(g.forward(x))
    assert x.grad is not None and x.grad.shape == x.shape


def test_graph_replay_is_bitwise(rng):
    w = Tensor(rng.standard_normal((3, 3, 3, 5)).astype(np.float32))
    x = Tensor(rng.standard_normal((2, 8, 8, 3)).astype(np.float32))
    g = Graph(lambda t: ad.relu(ad.conv2d(t, w, 2, 1)))
    a = g.forward(x).data.copy()
    b = g.forward(x).data.copy()
    assert a.tobytes() == b.tobytes()


def test_tape_is_topologically_ordered(rng):
    w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    g = Graph(lambda t: ad.mse(ad.reshape(ad.matmul(ad.relu(t), w), (6,)), Tensor(np.zeros(6))))
    g.forward(Tensor(rng.standard_normal((3, 4))))
    position = {}
    for i, node in enumerate(g.nodes):
        assert node.index == i
        for t in node.inputs:
            if t._node is not None:
                assert position[id(t._node)] < i
        position[id(node)] = i


@pytest.mark.parametrize("op_name", sorted(OP_CASES))
def test_every_op_matches_finite_differences(op_name):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        inputs, attrs = random_case(op_name, rng)
        worst = max(worst, ad.check_op(op_name, inputs, attrs, rng=rng))
    assert worst < 1e-3


@pytest.mark.parametrize("op_name", sorted(OP_CASES))
def test_every_op_64bit(op_name):
    rng = np.random.default_rng(11)
    for _ in range(5):
        inputs, attrs = random_case(op_name, rng)
        assert ad.check_op(op_name, inputs, attrs, rng=rng, dtype=np.float64) < 1e-6


def test_registry_covers_required_primitives():
    assert {"conv2d", "matmul", "bias_add", "relu", "global_avg_pool", "mse", "add",
            "scale"} <= set(ad.OPS)
    assert set(OP_CASES) == set(ad.OPS)


def test_gradient_linearity(rng):
    x = Tensor(rng.standard_normal((2, 5, 5, 3)))
    w = Tensor(rng.standard_normal((3, 3, 3, 2)), requires_grad=True)
    y1 = Tensor(rng.standard_normal((2, 5, 5, 2)))
    y2 = Tensor(rng.standard_normal((2, 5, 5, 2)))

    def grad_of(fn):
        w.grad = None
        g = Graph(fn)
        g.backward(g.forward(x))
        return w.grad.astype(np.float64)

    l1 = lambda t: ad.mse(ad.conv2d(t, w, 1, 1), y1)
    l2 = lambda t: ad.sum_all(ad.relu(ad.conv2d(t, w, 1, 1)))
    a, b = 0.7, -1.3
    combined = grad_of(lambda t: ad.add(ad.scale(l1(t), a), ad.scale(l2(t), b)))
    separate = a * grad_of(l1) + b * grad_of(l2)
    np.testing.assert_allclose(combined, separate, atol=1e-6 * max(1, np.abs(separate).max()))


def test_relu_gradient_is_exactly_zero_or_one(rng):
    data = rng.standard_normal(200)
    data[np.abs(data) < 1e-3] = 0.5
    x = Tensor(data, requires_grad=True)
    g = Graph(lambda t: ad.relu(t).sum())
    g.backward(g.forward(x))
    assert np.all(x.grad[data > 0] == 1.0)
    assert np.all(x.grad[data < 0] == 0.0)


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    g = Graph(lambda t: ad.relu(t).sum())
    g.backward(g.forward(x))
    assert np.all(x.grad == 0.0)


def test_global_average_pool_spreads_uniformly(rng):
    x = Tensor(rng.standard_normal((2, 4, 5, 3)), requires_grad=True)
    g = Graph(lambda t: ad.global_avg_pool(t).sum())
    g.backward(g.forward(x))
    assert np.allclose(x.grad, 1.0 / 20)


def test_gradients_accumulate_across_reuse():
    w = Tensor(np.array([3.0]), requires_grad=True)
    g = Graph(lambda x: ad.add(ad.mul(w, x), ad.mul(w, w)).sum())
    g.backward(g.forward(Tensor(np.array([2.0]))))
    assert w.grad.tolist() == [2.0 + 6.0]


class TestCheckGradients:
    def test_linear_layer_passes(self, rng):
        w = Tensor(rng.standard_normal((4, 3)), requires_grad=True, name="w")
        b = Tensor(rng.standard_normal(3), requires_grad=True, name="b")
        y = Tensor(rng.standard_normal((5, 3)))
        g = Graph(lambda x: ad.mse(ad.bias_add(ad.matmul(x, w), b), y))
        g.forward(Tensor(rng.standard_normal((5, 4))))
        report = ad.check_gradients(g, 1e-3)
        assert report.passed, str(report)
        assert set(report.params) == {"w", "b"}

    def test_corrupted_rule_is_named(self, rng, monkeypatch):
        w = Tensor(rng.standard_normal((4, 3)), requires_grad=True, name="w")
        y = Tensor(rng.standard_normal((5, 3)))
        g = Graph(lambda x: ad.mse(ad.matmul(x, w), y))
        g.forward(Tensor(rng.standard_normal((5, 4))))
        matmul = ad.OPS["matmul"]
        original = type(matmul).backward

        def broken(self, grad, saved, needs):
            ga, gb = original(self, grad, saved, needs)
            return ga, None if gb is None else gb * 1.5

        monkeypatch.setattr(type(matmul), "backward", broken)
        report = ad.check_gradients(g, 1e-3)
        assert not report.passed
        assert report.failing_params == ["w"]
        assert any("matmul" in label for label in report.failing_ops)
        assert not any("mse" in label for label in report.failing_ops)

    def test_zero_parameter_graph_is_vacuous_pass(self, rng):
        g = Graph(lambda x: ad.relu(x).sum())
        g.forward(Tensor(rng.standard_normal(4)))
        report = ad.check_gradients(g)
        assert report.passed and report.params == {} and report.ops == []

    def test_requires_forward(self):
        with pytest.raises(ad.BackwardError):
            ad.check_gradients(Graph(lambda x: x.sum()))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 3), h=st.integers(3, 9), c=st.integers(1, 3), o=st.integers(1, 3),
       k=st.sampled_from([1, 2, 3]), stride=st.integers(1, 3), pad=st.integers(0, 1),
       seed=st.integers(0, 2**31))
def test_conv_matches_direct_loop(n, h, c, o, k, stride, pad, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, h, h, c))
    w = r.standard_normal((k, k, c, o))
    out = ad.conv2d(Tensor(x), Tensor(w), stride, pad).data
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    oh = (h + 2 * pad - k) // stride + 1
    ref = np.zeros((n, oh, oh, o))
    for b in range(n):
        for i in range(oh):
            for j in range(oh):
                patch = xp[b, i * stride:i * stride + k, j * stride:j * stride + k]
                ref[b, i, j] = np.tensordot(patch, w, axes=3)
    np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-10)


def test_independent_graphs_on_threads(rng):
    w = rng.standard_normal((3, 3, 3, 4)).astype(np.float32)
    xs = [rng.standard_normal((2, 8, 8, 3)).astype(np.float32) for _ in range(4)]

    def run(x):
        wt = Tensor(w, requires_grad=True)
        g = Graph(lambda t: ad.global_avg_pool(ad.relu(ad.conv2d(t, wt, 1, 1))).sum())
        g.backward(g.forward(Tensor(x)))
        return len(g.nodes), wt.grad

    expected = [run(x) for x in xs]
    results = [None] * 4

    def worker(i):
        results[i] = run(xs[i])

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for (n1, g1), (n2, g2) in zip(expected, results):
        assert n1 == n2 and np.array_equal(g1, g2)
