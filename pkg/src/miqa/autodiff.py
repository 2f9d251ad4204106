"""Reverse-mode automatic differentiation over dense numpy arrays.

Every primitive is an :class:`Op` with a ``forward`` that returns the output
plus whatever the backward rule needs, and a ``backward`` that maps the
upstream gradient to one gradient per input. Ops are looked up by name in
:data:`OPS` at call time, so a rule can be swapped (e.g. to inject a fault in
a gradient check) without touching the tensors.

Executed ops are recorded as :class:`Node` objects. When a :class:`Graph` is
active the nodes are appended to its tape, which is topologically ordered by
construction.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from miqa import _ext

DEFAULT_DTYPE = np.float32


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class BackwardError(AutodiffError, RuntimeError):
    pass


class Tensor:
    """A dense array that may take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, name=self.name)

    def backward(self):
        backward(None, self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # arithmetic sugar over the registered primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    output: Tensor
    attrs: dict
    saved: object
    index: int = -1

    @property
    def label(self):
        return f"node #{self.index} ({self.op})" if self.index >= 0 else f"node ({self.op})"


class Op:
    """A differentiable primitive; subclasses define forward and backward."""

    name = ""
    arity = 1

    def forward(self, *xs, **attrs):
        raise NotImplementedError

    def backward(self, g, saved, needs, **attrs):
        raise NotImplementedError


OPS: dict[str, Op] = {}


def register(op_cls):
    OPS[op_cls.name] = op_cls()
    return op_cls


# ---------------------------------------------------------------- graph tape

_state = threading.local()


def _active_graph():
    return getattr(_state, "graph", None)


def _next_label(op):
    g = _active_graph()
    return f"node #{len(g.nodes)} ({op})" if g is not None else f"node ({op})"


def apply(op_name, *inputs, **attrs):
    op = OPS[op_name]
    tensors = tuple(_as_tensor(x) for x in inputs)
    arrays = tuple(t.data for t in tensors)
    try:
        out, saved = op.forward(*arrays, **attrs)
    except ShapeError as exc:
        raise ShapeError(f"{_next_label(op_name)}: {exc}") from None
    needs_grad = any(t.requires_grad for t in tensors)
    result = Tensor(out, requires_grad=needs_grad)
    node = Node(op_name, tensors, result, attrs, saved)
    graph = _active_graph()
    if graph is not None:
        node.index = len(graph.nodes)
        graph.nodes.append(node)
    if needs_grad:
        result._node = node
    return result


@dataclass(eq=False)
class Graph:
    """A recorded forward computation.

    ``fn`` receives the input tensors and returns the output tensor. If
    ``input_shapes`` is given, each entry is a shape tuple (``None`` entries
    and ``-1`` extents match anything) checked before ``fn`` runs.
    """

    fn: Callable[..., Tensor]
    input_shapes: Sequence | None = None
    name: str = "graph"
    nodes: list = field(default_factory=list)
    inputs: tuple = ()
    output: Tensor | None = None

    @property
    def executed(self):
        return self.output is not None

    def _check_inputs(self, inputs):
        if self.input_shapes is None:
            return
        if len(inputs) != len(self.input_shapes):
            raise ShapeError(
                f"{self.name}: expected {len(self.input_shapes)} inputs, got {len(inputs)}"
            )
        for k, (t, want) in enumerate(zip(inputs, self.input_shapes)):
            if want is None:
                continue
            want = tuple(want)
            ok = len(t.shape) == len(want) and all(
                w in (-1, None) or w == s for w, s in zip(want, t.shape)
            )
            if not ok:
                raise ShapeError(f"{self.name}: input[{k}] has shape {t.shape}, expected {want}")

    def forward(self, *inputs):
        inputs = tuple(_as_tensor(x) for x in inputs)
        self._check_inputs(inputs)
        self.nodes = []
        prev = _active_graph()
        _state.graph = self
        try:
            out = self.fn(*inputs)
        finally:
            _state.graph = prev
        self.inputs = inputs
        self.output = out
        return out

    def backward(self, loss=None):
        backward(self, self.output if loss is None else loss)

    def leaves(self):
        """Leaf tensors requiring grad, in first-use order."""
        seen, out = set(), []
        for t in self.inputs:
            if t.requires_grad and id(t) not in seen:
                seen.add(id(t))
                out.append(t)
        for node in self.nodes:
            for t in node.inputs:
                if t.is_leaf and t.requires_grad and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

    def parameters(self):
        """Leaves requiring grad that are not graph inputs."""
        inputs = {id(t) for t in self.inputs}
        return [t for t in self.leaves() if id(t) not in inputs]


def forward(graph: Graph, inputs: Sequence) -> Tensor:
    return graph.forward(*inputs)


def _topo_nodes(loss):
    order, seen = [], set()
    stack = [(loss._node, False)] if loss._node is not None else []
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for t in node.inputs:
            if t._node is not None and id(t._node) not in seen:
                stack.append((t._node, False))
    return order


def backward(graph: Graph | None, loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if graph is not None and not graph.executed:
        raise BackwardError(f"{graph.name}: backward called before forward")
    if loss is None:
        raise BackwardError("backward called before forward")
    if loss.data.size != 1:
        raise BackwardError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if graph is not None:
        nodes = [n for n in graph.nodes if n.output.requires_grad]
    else:
        nodes = _topo_nodes(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        needs = tuple(t.requires_grad for t in node.inputs)
        in_grads = OPS[node.op].backward(g, node.saved, needs, **node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if not t.requires_grad or gi is None:
                continue
            if gi.shape != t.shape:
                raise BackwardError(
                    f"{node.label}: gradient shape {gi.shape} does not match input {t.shape}"
                )
            if t._node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            elif id(t) in grads:
                grads[id(t)] = grads[id(t)] + gi
            else:
                grads[id(t)] = gi


# ---------------------------------------------------------------- primitives


def _require_same(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


@register
class Add(Op):
    name = "add"
    arity = 2

    def forward(self, a, b):
        _require_same(a, b, "add")
        return a + b, None

    def backward(self, g, saved, needs):
        return g, g


@register
class Mul(Op):
    name = "mul"
    arity = 2

    def forward(self, a, b):
        _require_same(a, b, "mul")
        return a * b, (a, b)

    def backward(self, g, saved, needs):
        a, b = saved
        return g * b, g * a


@register
class Scale(Op):
    name = "scale"

    def forward(self, a, factor=1.0):
        return a * a.dtype.type(factor), None

    def backward(self, g, saved, needs, factor=1.0):
        return (g * g.dtype.type(factor),)


@register
class SumAll(Op):
    name = "sum"

    def forward(self, a):
        return np.asarray(a.sum(), dtype=a.dtype), a.shape

    def backward(self, g, saved, needs):
        return (np.broadcast_to(g, saved).copy(),)


@register
class Reshape(Op):
    name = "reshape"

    def forward(self, a, shape=()):
        try:
            return a.reshape(shape), a.shape
        except ValueError:
            raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None

    def backward(self, g, saved, needs, shape=()):
        return (g.reshape(saved),)


@register
class MatMul(Op):
    name = "matmul"
    arity = 2

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        return a @ b, (a, b)

    def backward(self, g, saved, needs):
        a, b = saved
        ga = g @ b.T if needs[0] else None
        gb = a.T @ g if needs[1] else None
        return ga, gb


@register
class BiasAdd(Op):
    """Adds a per-channel bias along the last axis."""

    name = "bias_add"
    arity = 2

    def forward(self, x, b):
        if x.ndim < 1 or b.ndim != 1 or x.shape[-1] != b.shape[0]:
            raise ShapeError(f"bias_add: bias {b.shape} does not fit input {x.shape}")
        return x + b, None

    def backward(self, g, saved, needs):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)


@register
class ReLU(Op):
    name = "relu"

    def forward(self, x):
        # gradient at exactly 0 is taken as 0
        return np.maximum(x, x.dtype.type(0)), x > 0

    def backward(self, g, mask, needs):
        return (np.multiply(g, mask, dtype=g.dtype),)


@register
class GlobalAvgPool(Op):
    """Spatial mean of a channels-last (N, H, W, C) map."""

    name = "global_avg_pool"

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"global_avg_pool: expected (N, H, W, C), got {x.shape}")
        return x.mean(axis=(1, 2), dtype=x.dtype), x.shape

    def backward(self, g, shape, needs):
        n, h, w, c = shape
        scale = g.dtype.type(1.0 / (h * w))
        return (np.broadcast_to((g * scale)[:, None, None, :], shape).copy(),)


@register
class MSELoss(Op):
    """Mean of squared differences over all elements."""

    name = "mse"
    arity = 2

    def forward(self, pred, target):
        _require_same(pred, target, "mse")
        if pred.size == 0:
            raise ShapeError("mse: empty batch")
        diff = pred - target
        return np.asarray(np.mean(diff * diff, dtype=pred.dtype), dtype=pred.dtype), diff

    def backward(self, g, diff, needs):
        gd = diff * (g * diff.dtype.type(2.0 / diff.size))
        return gd, -gd


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


@register
class Conv2d(Op):
    """Cross-correlation of an (N, H, W, C) input with (KH, KW, C, O) filters.

    The output is (N, OH, OW, O); zero padding of ``padding`` pixels per side.
    """

    name = "conv2d"
    arity = 2

    def forward(self, x, w, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
            raise ShapeError(f"conv2d: input {x.shape} incompatible with filters {w.shape}")
        n, h, wd, c = x.shape
        kh, kw, _, o = w.shape
        if kh > h + 2 * padding or kw > wd + 2 * padding:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
        oh = conv_output_size(h, kh, stride, padding)
        ow = conv_output_size(wd, kw, stride, padding)
        cols = _ext.im2col(x, kh, kw, stride, padding)
        out = (cols @ w.reshape(-1, o)).reshape(n, oh, ow, o)
        return out, (cols, x.shape, w)

    def backward(self, g, saved, needs, stride=1, padding=0):
        cols, xshape, w = saved
        kh, kw, c, o = w.shape
        g2 = g.reshape(-1, o)
        gw = (cols.T @ g2).reshape(w.shape) if needs[1] else None
        gx = None
        if needs[0]:
            n, h, wd, _ = xshape
            gx = _ext.col2im(g2 @ w.reshape(-1, o).T, n, h, wd, c, kh, kw, stride, padding)
        return gx, gw


# ---------------------------------------------------------------- functional API


def add(a, b):
    return apply("add", a, b)


def mul(a, b):
    return apply("mul", a, b)


def scale(a, factor):
    return apply("scale", a, factor=float(factor))


def sum_all(a):
    return apply("sum", a)


def reshape(a, shape):
    return apply("reshape", a, shape=tuple(shape))


def matmul(a, b):
    return apply("matmul", a, b)


def bias_add(x, b):
    return apply("bias_add", x, b)


def relu(x):
    return apply("relu", x)


def global_avg_pool(x):
    return apply("global_avg_pool", x)


def mse(pred, target):
    return apply("mse", pred, target)


def conv2d(x, w, stride=1, padding=0):
    return apply("conv2d", x, w, stride=int(stride), padding=int(padding))


# ---------------------------------------------------------------- gradient check


def relative_error(analytic, numeric, floor=1e-3):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _probe_indices(size, max_entries, rng):
    if max_entries is None or size <= max_entries:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_entries, replace=False))


def numeric_gradient(f, x, indices, step=1e-3):
    """Central differences of scalar ``f()`` w.r.t. flat ``indices`` of ``x`` (in place)."""
    flat = x.reshape(-1)
    out = np.empty(len(indices))
    for k, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f())
        flat[i] = orig - step
        fm = float(f())
        flat[i] = orig
        out[k] = (fp - fm) / (2 * step)
    return out


@dataclass
class GradCheckReport:
    tolerance: float
    params: dict = field(default_factory=dict)
    ops: list = field(default_factory=list)

    @property
    def failing_params(self):
        return [name for name, err in self.params.items() if not err < self.tolerance]

    @property
    def failing_ops(self):
        return [label for label, err in self.ops if not err < self.tolerance]

    @property
    def passed(self):
        return not self.failing_params and not self.failing_ops

    @property
    def max_error(self):
        errs = list(self.params.values()) + [e for _, e in self.ops]
        return max(errs, default=0.0)

    def __str__(self):
        lines = [f"gradient check (tol {self.tolerance:g}): {'pass' if self.passed else 'FAIL'}"]
        lines += [f"  param {name}: {err:.3e}" for name, err in self.params.items()]
        lines += [f"  {label}: {err:.3e}" for label, err in self.ops]
        return "\n".join(lines)


def check_op(op_name, inputs, attrs=None, *, step=1e-3, floor=1e-3, max_entries=None,
             rng=None, dtype=np.float32):
    """Max relative error of one op's backward rule against central differences.

    The analytic rule runs at ``dtype``; the finite-difference oracle always
    evaluates the forward rule in float64 so its own rounding stays negligible.
    Each input gets the upstream gradient of ``sum(r * op(x))`` for a random ``r``.
    """
    op = OPS[op_name]
    attrs = attrs or {}
    rng = np.random.default_rng(0) if rng is None else rng
    xs = [np.array(x, dtype=dtype) for x in inputs]
    out, saved = op.forward(*xs, **attrs)
    r = rng.standard_normal(np.shape(out))
    analytic = op.backward(r.astype(dtype), saved, (True,) * len(xs), **attrs)
    x64 = [x.astype(np.float64) for x in xs]
    worst = 0.0
    for k, x in enumerate(x64):
        if analytic[k] is None:
            continue

        def f():
            return np.sum(r * op.forward(*x64, **attrs)[0])

        idx = _probe_indices(x.size, max_entries, rng)
        num = numeric_gradient(f, x, idx, step)
        err = relative_error(np.asarray(analytic[k]).reshape(-1)[idx], num, floor)
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


def check_gradients(graph: Graph, tolerance=1e-3, *, step=1e-3, floor=1e-3,
                    max_entries=32, seed=0, check_ops=True):
    """Compare the graph's analytic gradients with central differences.

    The graph must already have been run forward (its inputs are reused) and
    must produce a scalar. Reports the max relative error per parameter and,
    with ``check_ops``, per recorded node so a broken rule is named directly.
    Finite differences are taken in float64.
    """
    if not graph.executed:
        raise BackwardError(f"{graph.name}: check_gradients needs a prior forward pass")
    report = GradCheckReport(tolerance)
    rng = np.random.default_rng(seed)
    params = graph.parameters()
    if not params:
        return report
    inputs = graph.inputs
    for p in params:
        p.grad = None
    out = graph.forward(*inputs)
    graph.backward(out)
    analytic = [p.grad.copy() for p in params]
    node_records = [(n.label, n.op, [t.data.copy() for t in n.inputs], dict(n.attrs))
                    for n in graph.nodes if n.output.requires_grad]

    leaves = {id(t): t for t in inputs}
    for n in graph.nodes:
        for t in n.inputs:
            if t.is_leaf:
                leaves.setdefault(id(t), t)
    originals = {k: t.data for k, t in leaves.items()}
    try:
        for t in leaves.values():
            t.data = t.data.astype(np.float64)

        def f():
            return graph.fn(*inputs).data

        for k, p in enumerate(params):
            name = p.name or f"param[{k}]"
            idx = _probe_indices(p.data.size, max_entries, rng)
            num = numeric_gradient(f, p.data, idx, step)
            err = relative_error(analytic[k].reshape(-1)[idx], num, floor)
            report.params[name] = float(err.max(initial=0.0))
    finally:
        for k, t in leaves.items():
            t.data = originals[k]

    if check_ops:
        for label, op_name, arrays, attrs in node_records:
            err = check_op(op_name, arrays, attrs, step=step, floor=floor,
                           max_entries=max_entries, rng=rng, dtype=arrays[0].dtype)
            report.ops.append((label, err))
    return report
