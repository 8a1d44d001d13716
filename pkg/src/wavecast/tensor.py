"""Tape-based reverse-mode differentiation over numpy arrays.

A :class:`Graph` records every operation applied to its nodes in execution
order.  ``backward`` walks the tape in reverse, leaving a gradient on every
parameter node and on every intermediate activation (Grad-CAM reads the
latter).  Because each record keeps its op and inputs, the tape can be
replayed after editing parameter values, which is what the finite-difference
checker relies on.

All values are float64.  Every op accepts arbitrary leading batch axes.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, NumericError, ShapeError


class Node:
    __slots__ = ("graph", "id", "op", "inputs", "attrs", "value", "grad", "kind", "name", "needs_grad")

    def __init__(self, graph, idx, kind, value, op=None, inputs=(), attrs=None, name=None):
        self.graph = graph
        self.id = idx
        self.kind = kind  # "param", "const" or "op"
        self.value = value
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.grad = None
        self.name = name
        self.needs_grad = kind == "param"

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or (self.op.__name__ if self.op else self.kind)
        return f"Node({self.id}, {label}, shape={self.value.shape})"


class Graph:
    """Records nodes in topological (execution) order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: set[int] = set()
        self._named: dict[str, Node] = {}

    def _add(self, node):
        self.nodes.append(node)
        if node.name is not None:
            self._named[node.name] = node
        return node

    def param(self, value, name=None) -> Node:
        node = Node(self, len(self.nodes), "param", _as_array(value), name=name)
        self.params.add(node.id)
        return self._add(node)

    def const(self, value, name=None) -> Node:
        return self._add(Node(self, len(self.nodes), "const", _as_array(value), name=name))

    def record(self, op, inputs, name=None, **attrs) -> Node:
        for x in inputs:
            if x.graph is not self:
                raise ArgumentError("inputs belong to a different graph")
        value = op.forward(*(x.value for x in inputs), **attrs)
        _check_finite(value, op)
        node = Node(self, len(self.nodes), "op", value, op=op, inputs=[x.id for x in inputs],
                    attrs=attrs, name=name)
        node.needs_grad = any(x.needs_grad for x in inputs)
        return self._add(node)

    def __getitem__(self, name) -> Node:
        try:
            return self._named[name]
        except KeyError:
            raise ArgumentError(f"no node named {name!r}") from None

    def named(self):
        return dict(self._named)

    def replay(self):
        """Recompute every op node from the current leaf values."""
        for node in self.nodes:
            if node.kind == "op":
                node.value = node.op.forward(*(self.nodes[i].value for i in node.inputs),
                                             **node.attrs)
                _check_finite(node.value, node.op)

    def backward(self, out: Node):
        return backward(self, out)

    def release(self):
        """Drop every node so activations are freed now rather than by the cycle collector."""
        self.nodes = []
        self._named = {}
        self.params = set()


def _as_array(value):
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite value supplied to graph")
    return arr


def _check_finite(value, op):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite output from {op.__name__}")


def backward(graph: Graph, out: Node) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every node upstream of the scalar ``out``.

    Returns a mapping param-node id -> gradient.  Parameters that do not
    influence ``out`` receive zeros.
    """
    if out.value.size != 1:
        raise ArgumentError(f"backward needs a scalar output, got shape {out.value.shape}")
    for node in graph.nodes:
        node.grad = None
    out.grad = np.ones_like(out.value)
    for node in reversed(graph.nodes[: out.id + 1]):
        if node.kind != "op" or node.grad is None or not node.needs_grad:
            continue
        ins = [graph.nodes[i] for i in node.inputs]
        extra = {"need": tuple(x.needs_grad for x in ins)} if getattr(node.op, "partial", False) else {}
        grads = node.op.backward(node.grad, *(x.value for x in ins), out=node.value, **node.attrs, **extra)
        for x, g in zip(ins, grads):
            if g is None or not x.needs_grad:
                continue
            x.grad = g if x.grad is None else x.grad + g
    for pid in graph.params:
        p = graph.nodes[pid]
        if p.grad is None:
            p.grad = np.zeros_like(p.value)
    return {pid: graph.nodes[pid].grad for pid in graph.params}


def finite_diff_check(graph: Graph, param: Node, h: float = 1e-3, out: Node | None = None) -> float:
    """Max relative error between analytic and central-difference gradients of ``param``."""
    if not h > 0:
        raise ArgumentError("step h must be positive")
    if param.kind != "param":
        raise ArgumentError("finite_diff_check needs a parameter node")
    out = graph.nodes[-1] if out is None else out
    backward(graph, out)
    analytic = param.grad.copy()
    base = param.value
    numeric = np.empty_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        probe = base.copy()
        probe.flat[i] += h
        param.value = probe
        graph.replay()
        f_plus = float(out.value.reshape(-1)[0])
        probe.flat[i] = base.flat[i] - h
        graph.replay()
        f_minus = float(out.value.reshape(-1)[0])
        flat[i] = (f_plus - f_minus) / (2.0 * h)
    param.value = base
    graph.replay()
    if base.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _batch_sum(arr, core_ndim):
    """Sum away leading batch axes so that ``core_ndim`` trailing axes remain."""
    extra = arr.ndim - core_ndim
    return arr.sum(axis=tuple(range(extra))) if extra > 0 else arr


class _Conv1d:
    __name__ = "conv1d"
    partial = True  # backward skips gradients nobody needs

    @staticmethod
    def forward(x, w, stride=1, groups=1):
        cin, length = x.shape[-2:]
        cout, cin_g, k = w.shape
        lead = x.shape[:-2]
        lout = (length - k) // stride + 1
        cols = sliding_window_view(x, k, axis=-1)[..., ::stride, :]  # (..., Cin, Lout, k)
        cols = cols.reshape(lead + (groups, cin_g, lout, k))
        cols = np.moveaxis(cols, -2, -3).reshape(lead + (groups, lout, cin_g * k))
        wg = w.reshape(groups, cout // groups, cin_g * k).transpose(0, 2, 1)
        out = cols @ wg  # (..., G, Lout, Cout_g)
        return np.swapaxes(out, -1, -2).reshape(lead + (cout, lout))

    @staticmethod
    def backward(g, x, w, out, stride=1, groups=1, need=(True, True)):
        cin, length = x.shape[-2:]
        cout, cin_g, k = w.shape
        lead = x.shape[:-2]
        lout = g.shape[-1]
        gg = g.reshape(lead + (groups, cout // groups, lout))
        cols = sliding_window_view(x, k, axis=-1)[..., ::stride, :]
        cols = cols.reshape(lead + (groups, cin_g, lout, k))
        cols = np.moveaxis(cols, -2, -3).reshape(lead + (groups, lout, cin_g * k))
        gw = _batch_sum(gg @ cols, 3).reshape(w.shape) if need[1] else None  # (G, Cout_g, Cin_g*k)
        if not need[0]:
            return None, gw
        wg = w.reshape(groups, cout // groups, cin_g * k)
        dcols = np.swapaxes(gg, -1, -2) @ wg  # (..., G, Lout, Cin_g*k)
        dcols = dcols.reshape(lead + (groups, lout, cin_g, k))
        dcols = np.moveaxis(dcols, -3, -2).reshape(lead + (cin, lout, k))
        gx = np.zeros_like(x)
        span = stride * (lout - 1) + 1
        for j in range(k):
            gx[..., j:j + span:stride] += dcols[..., j]
        return gx, gw


class _Conv2d:
    __name__ = "conv2d"
    partial = True

    @staticmethod
    def forward(x, w):
        cout, cin, kh, kw = w.shape
        lead = x.shape[:-3]
        cols = sliding_window_view(x, (kh, kw), axis=(-2, -1))  # (..., Cin, Ho, Wo, kh, kw)
        ho, wo = cols.shape[-4:-2]
        cols = np.moveaxis(cols, -5, -3).reshape(lead + (ho * wo, cin * kh * kw))
        out = cols @ w.reshape(cout, -1).T  # (..., Ho*Wo, Cout)
        return np.swapaxes(out, -1, -2).reshape(lead + (cout, ho, wo))

    @staticmethod
    def backward(g, x, w, out, need=(True, True)):
        cout, cin, kh, kw = w.shape
        lead = x.shape[:-3]
        ho, wo = g.shape[-2:]
        gw = None
        if need[1]:
            cols = sliding_window_view(x, (kh, kw), axis=(-2, -1))
            cols = np.moveaxis(cols, -5, -3).reshape(lead + (ho * wo, cin * kh * kw))
            gf = g.reshape(lead + (cout, ho * wo))
            gw = _batch_sum(gf @ cols, 2).reshape(w.shape)
        if not need[0]:
            return None, gw
        gx = np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                # (..., Cout, Ho, Wo) x (Cout, Cin) -> (..., Cin, Ho, Wo)
                contrib = np.einsum("...ohw,oc->...chw", g, w[:, :, i, j], optimize=True)
                gx[..., i:i + ho, j:j + wo] += contrib
        return gx, gw


class _Affine:
    __name__ = "affine"

    @staticmethod
    def forward(x, w, b):
        return x @ w.T + b

    @staticmethod
    def backward(g, x, w, b, out):
        gx = g @ w
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.reshape(-1, x.shape[-1])
        return gx, gw, g2.sum(axis=0)


class _Relu:
    __name__ = "relu"

    @staticmethod
    def forward(x):
        return np.maximum(x, 0.0)

    @staticmethod
    def backward(g, x, out):
        return (g * (x > 0),)


class _Softmax:
    __name__ = "softmax"

    @staticmethod
    def forward(x):
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        return z / z.sum(axis=-1, keepdims=True)

    @staticmethod
    def backward(g, x, out):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


class _Concat:
    __name__ = "concat"

    @staticmethod
    def forward(*xs, axis=-1):
        return np.concatenate(xs, axis=axis)

    @staticmethod
    def backward(g, *xs, out, axis=-1):
        sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.split(g, sizes, axis=axis)


class _Stack:
    __name__ = "stack"

    @staticmethod
    def forward(*xs, axis=0):
        return np.stack(xs, axis=axis)

    @staticmethod
    def backward(g, *xs, out, axis=0):
        return [np.take(g, i, axis=axis) for i in range(len(xs))]


class _MseLoss:
    __name__ = "mse_loss"

    @staticmethod
    def forward(pred, target):
        return np.array(np.mean((pred - target) ** 2))

    @staticmethod
    def backward(g, pred, target, out):
        d = 2.0 * (pred - target) / pred.size * g
        return d, -d


class _Add:
    __name__ = "add"

    @staticmethod
    def forward(a, b):
        return a + b

    @staticmethod
    def backward(g, a, b, out):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class _Mul:
    __name__ = "mul"

    @staticmethod
    def forward(a, b):
        return a * b

    @staticmethod
    def backward(g, a, b, out):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class _Sum:
    __name__ = "sum"

    @staticmethod
    def forward(x):
        return np.array(x.sum())

    @staticmethod
    def backward(g, x, out):
        return (np.broadcast_to(g, x.shape).copy(),)


class _ChannelBias:
    __name__ = "channel_bias"

    @staticmethod
    def forward(x, b, spatial=1):
        return x + b.reshape(b.shape + (1,) * spatial)

    @staticmethod
    def backward(g, x, b, out, spatial=1):
        gb = g.sum(axis=tuple(range(g.ndim - spatial, g.ndim)))
        return g, _batch_sum(gb, 1)


class _WeightedSum:
    __name__ = "weighted_sum"

    @staticmethod
    def forward(w, stack):
        return np.tensordot(w, stack, axes=(0, 0))

    @staticmethod
    def backward(g, w, stack, out):
        gw = np.tensordot(stack, g, axes=(tuple(range(1, stack.ndim)), tuple(range(g.ndim))))
        gs = w.reshape((-1,) + (1,) * g.ndim) * g[None]
        return gw, gs


class _BinPool:
    """Average pooling of the last axis into ``bins`` near-equal contiguous segments."""
    __name__ = "bin_pool"

    @staticmethod
    def _edges(length, bins):
        return np.linspace(0, length, bins + 1).round().astype(int)

    @staticmethod
    def forward(x, bins=1):
        e = _BinPool._edges(x.shape[-1], bins)
        return np.stack([x[..., e[i]:e[i + 1]].mean(axis=-1) for i in range(bins)], axis=-1)

    @staticmethod
    def backward(g, x, out, bins=1):
        e = _BinPool._edges(x.shape[-1], bins)
        gx = np.empty_like(x)
        for i in range(bins):
            width = e[i + 1] - e[i]
            gx[..., e[i]:e[i + 1]] = g[..., i:i + 1] / width
        return (gx,)


class _Mean:
    __name__ = "mean"

    @staticmethod
    def forward(x, axis=-1):
        return x.mean(axis=axis)

    @staticmethod
    def backward(g, x, out, axis=-1):
        return (np.broadcast_to(np.expand_dims(g, axis) / x.shape[axis], x.shape).copy(),)


class _Transpose:
    __name__ = "transpose"

    @staticmethod
    def forward(x, axes=()):
        return np.transpose(x, axes)

    @staticmethod
    def backward(g, x, out, axes=()):
        return (np.transpose(g, np.argsort(axes)),)


class _Reshape:
    __name__ = "reshape"

    @staticmethod
    def forward(x, shape=()):
        return x.reshape(shape)

    @staticmethod
    def backward(g, x, out, shape=()):
        return (g.reshape(x.shape),)


# public op constructors ----------------------------------------------------

def conv1d(x: Node, w: Node, stride: int = 1, groups: int = 1, name=None) -> Node:
    """Valid 1D cross-correlation: out[c, t] = sum_ij x[i, t*stride + j] * w[c, i, j]."""
    if stride < 1:
        raise ArgumentError(f"stride must be >= 1, got {stride}")
    if w.value.ndim != 3 or x.value.ndim < 2:
        raise ShapeError("conv1d expects x (..., C_in, L) and w (C_out, C_in/groups, k)")
    cin, length = x.shape[-2:]
    cout, cin_g, k = w.shape
    if cin % groups or cout % groups or cin // groups != cin_g:
        raise ShapeError(f"channels {cin}->{cout} incompatible with kernel {w.shape} at groups={groups}")
    if k > length:
        raise ShapeError(f"kernel length {k} exceeds input length {length}")
    return x.graph.record(_Conv1d, [x, w], name=name, stride=int(stride), groups=int(groups))


def conv2d(x: Node, w: Node, name=None) -> Node:
    """Valid 2D cross-correlation with stride 1."""
    if w.value.ndim != 4 or x.value.ndim < 3:
        raise ShapeError("conv2d expects x (..., C_in, H, W) and w (C_out, C_in, kh, kw)")
    cin, hgt, wid = x.shape[-3:]
    if w.shape[1] != cin:
        raise ShapeError(f"input has {cin} channels, kernel expects {w.shape[1]}")
    if w.shape[2] > hgt or w.shape[3] > wid:
        raise ShapeError(f"kernel {w.shape[2:]} exceeds input extent {(hgt, wid)}")
    return x.graph.record(_Conv2d, [x, w], name=name)


def affine(x: Node, w: Node, b: Node, name=None) -> Node:
    if w.value.ndim != 2 or w.shape[1] != x.shape[-1] or b.shape != (w.shape[0],):
        raise ShapeError(f"affine: input {x.shape}, weights {w.shape}, bias {b.shape}")
    return x.graph.record(_Affine, [x, w, b], name=name)


def relu(x: Node, name=None) -> Node:
    return x.graph.record(_Relu, [x], name=name)


def softmax(x: Node, name=None) -> Node:
    if x.value.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax needs at least one element")
    return x.graph.record(_Softmax, [x], name=name)


def concat(xs, axis: int = -1, name=None) -> Node:
    xs = list(xs)
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {x.shape} differ off axis {axis}")
    return xs[0].graph.record(_Concat, xs, name=name, axis=axis)


def stack(xs, axis: int = 0, name=None) -> Node:
    xs = list(xs)
    if any(x.shape != xs[0].shape for x in xs):
        raise ShapeError("stack needs equal shapes")
    return xs[0].graph.record(_Stack, xs, name=name, axis=axis)


def mse_loss(pred: Node, target: Node, name=None) -> Node:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: {pred.shape} vs {target.shape}")
    return pred.graph.record(_MseLoss, [pred, target], name=name)


def add(a: Node, b: Node, name=None) -> Node:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return a.graph.record(_Add, [a, b], name=name)


def mul(a: Node, b: Node, name=None) -> Node:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return a.graph.record(_Mul, [a, b], name=name)


def total(x: Node, name=None) -> Node:
    return x.graph.record(_Sum, [x], name=name)


def channel_bias(x: Node, b: Node, spatial: int = 1, name=None) -> Node:
    """Add a per-channel bias; channels sit just before ``spatial`` trailing axes."""
    if x.shape[-1 - spatial] != b.shape[0] or b.value.ndim != 1:
        raise ShapeError(f"bias {b.shape} does not match channels of {x.shape}")
    return x.graph.record(_ChannelBias, [x, b], name=name, spatial=spatial)


def weighted_sum(w: Node, branches: Node, name=None) -> Node:
    """sum_m w[m] * branches[m]."""
    if w.value.ndim != 1 or branches.shape[0] != w.shape[0]:
        raise ShapeError(f"weighted_sum: weights {w.shape}, branches {branches.shape}")
    return w.graph.record(_WeightedSum, [w, branches], name=name)


def bin_pool(x: Node, bins: int = 1, name=None) -> Node:
    if not 1 <= bins <= x.shape[-1]:
        raise ShapeError(f"cannot pool length {x.shape[-1]} into {bins} bins")
    return x.graph.record(_BinPool, [x], name=name, bins=int(bins))


def reshape(x: Node, shape, name=None) -> Node:
    shape = tuple(shape)
    try:
        x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return x.graph.record(_Reshape, [x], name=name, shape=shape)


def mean(x: Node, axis: int, name=None) -> Node:
    return x.graph.record(_Mean, [x], name=name, axis=int(axis))


def transpose(x: Node, axes, name=None) -> Node:
    axes = tuple(axes)
    if sorted(a % x.value.ndim for a in axes) != list(range(x.value.ndim)):
        raise ShapeError(f"invalid permutation {axes} for {x.value.ndim} axes")
    return x.graph.record(_Transpose, [x], name=name, axes=axes)
