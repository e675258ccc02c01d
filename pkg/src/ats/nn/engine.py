"""Reverse-mode autodiff: a recording graph over numpy arrays.

A :class:`Graph` records every tensor produced during a forward pass, in
creation order. Because operands always exist before their results, that
order is already topological, so backpropagation is a single reverse sweep.
Gradients accumulate with ``+=`` so shared subexpressions and weight reuse
are handled naturally. A graph can be backpropagated once; reusing it raises
:class:`GraphConsumedError`.

Dtype follows the inputs: training runs float32, gradient checks can feed
float64 end to end.
"""

from __future__ import annotations

import numpy as np


class GraphConsumedError(RuntimeError):
    """backward() was called twice on the same recorded graph."""


class Param:
    """A named trainable array with an accumulated gradient."""

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = np.asarray(value, dtype=np.float32)
        self.grad = np.zeros_like(self.value)
        self.name = name

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Param({self.name or '<anon>'}, shape={self.value.shape})"


class Tensor:
    """A node in a recorded graph. Do not construct directly; use Graph ops."""

    __slots__ = ("graph", "value", "grad", "_backward", "_param")

    def __init__(self, graph, value):
        self.graph = graph
        self.value = np.asarray(value)
        self.grad = None
        self._backward = None
        self._param = None

    @property
    def shape(self):
        return self.value.shape

    def _accum(self, g):
        self.grad = g if self.grad is None else self.grad + g

    # operator sugar; non-Tensor operands become constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(_wrap(self.graph, other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(self.graph, other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """Records one forward pass and backpropagates it once."""

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._consumed = False

    def _node(self, value, backward=None) -> Tensor:
        t = Tensor(self, value)
        t._backward = backward
        self._nodes.append(t)
        return t

    def constant(self, value) -> Tensor:
        return self._node(np.asarray(value))

    def param(self, p: Param) -> Tensor:
        t = self._node(p.value)
        t._param = p
        return t

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(param) into every touched Param's .grad."""
        if self._consumed:
            raise GraphConsumedError("graph already backpropagated; rebuild the forward pass")
        self._consumed = True
        if loss.graph is not self:
            raise ValueError("loss belongs to a different graph")
        if loss.value.size != 1:
            raise ValueError("backward needs a scalar loss")
        loss._accum(np.ones_like(loss.value))
        for node in reversed(self._nodes):
            if node.grad is not None:
                if node._backward is not None:
                    node._backward(node.grad)
                if node._param is not None:
                    node._param.grad += node.grad.astype(node._param.grad.dtype)
            # drop the closure and the node list entry: tensors refer back to
            # the graph, so without this every step leaves a cycle full of
            # activation arrays for the gc
            node._backward = None
        self._nodes.clear()


def _wrap(graph: Graph, x) -> Tensor:
    if isinstance(x, Tensor):
        if x.graph is not graph:
            raise ValueError("operands come from different graphs")
        return x
    return graph.constant(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _wrap(a.graph, b)
    out_val = a.value + b.value

    def backward(g):
        a._accum(_unbroadcast(g, a.value.shape))
        b._accum(_unbroadcast(g, b.value.shape))

    return a.graph._node(out_val, backward)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(a.graph, b)
    out_val = a.value * b.value

    def backward(g):
        a._accum(_unbroadcast(g * b.value, a.value.shape))
        b._accum(_unbroadcast(g * a.value, b.value.shape))

    return a.graph._node(out_val, backward)


def div(a: Tensor, b) -> Tensor:
    b = _wrap(a.graph, b)
    out_val = a.value / b.value

    def backward(g):
        a._accum(_unbroadcast(g / b.value, a.value.shape))
        b._accum(_unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return a.graph._node(out_val, backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(g * 2.0 * a.value)

    return a.graph._node(a.value * a.value, backward)


def sqrt(a: Tensor) -> Tensor:
    out_val = np.sqrt(a.value)

    def backward(g):
        a._accum(g * 0.5 / out_val)

    return a.graph._node(out_val, backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        a._accum(g / a.value)

    return a.graph._node(np.log(a.value), backward)


def exp(a: Tensor) -> Tensor:
    out_val = np.exp(a.value)

    def backward(g):
        a._accum(g * out_val)

    return a.graph._node(out_val, backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.value)

    def backward(g):
        a._accum(g * (s + a.value * s * (1.0 - s)))

    return a.graph._node(a.value * s, backward)


def softplus(a: Tensor) -> Tensor:
    out_val = np.logaddexp(0.0, a.value)

    def backward(g):
        a._accum(g * _sigmoid(a.value))

    return a.graph._node(out_val, backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_val = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        a._accum(np.broadcast_to(gg, a.value.shape).copy() if np.ndim(gg) else np.full_like(a.value, gg))

    return a.graph._node(out_val, backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.value.size if axis is None else np.prod([a.value.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(count))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.value.shape

    def backward(g):
        a._accum(g.reshape(old))

    return a.graph._node(a.value.reshape(shape), backward)


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        a._accum(g.transpose(inv))

    return a.graph._node(a.value.transpose(axes), backward)


def concat(tensors, axis: int) -> Tensor:
    graph = tensors[0].graph
    tensors = [_wrap(graph, t) for t in tensors]
    sizes = [t.value.shape[axis] for t in tensors]
    out_val = np.concatenate([t.value for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accum(piece)

    return graph._node(out_val, backward)


# ---------------------------------------------------------------------------
# linear algebra and convolutions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    b = _wrap(a.graph, b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul supports 2-d operands only")
    out_val = a.value @ b.value

    def backward(g):
        a._accum(g @ b.value.T)
        b._accum(a.value.T @ g)

    return a.graph._node(out_val, backward)


def conv1d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """1-d convolution, x (N, Cin, L), w (Cout, Cin, K) -> (N, Cout, Lout).

    Same channels-last im2col lowering as conv3d.
    """
    w = _wrap(x.graph, w)
    n, cin, length = x.value.shape
    cout, cin2, k = w.value.shape
    if cin != cin2:
        raise ValueError("conv1d channel mismatch")
    xp = np.pad(x.value, ((0, 0), (0, 0), (pad, pad))) if pad else x.value
    xl = np.ascontiguousarray(xp.transpose(0, 2, 1))  # (N, Lp, Cin)
    lout = (length + 2 * pad - k) // stride + 1

    def cols_of(arr):  # (N, L', C) -> (N * Lout', K C), offset-major
        win = np.lib.stride_tricks.sliding_window_view(arr, k, axis=1)[:, ::stride]
        cols = win.transpose(0, 1, 3, 2).reshape(arr.shape[0] * win.shape[1], -1)
        return np.ascontiguousarray(cols)

    w_mat = np.ascontiguousarray(w.value.transpose(0, 2, 1).reshape(cout, -1))
    out_val = (cols_of(xl) @ w_mat.T).reshape(n, lout, cout)
    out_val = np.ascontiguousarray(out_val.transpose(0, 2, 1))

    def backward(g):
        g_l = np.ascontiguousarray(g.transpose(0, 2, 1))  # (N, Lout, Cout)
        g_mat = g_l.reshape(-1, cout)
        gw = (g_mat.T @ cols_of(xl)).reshape(cout, k, cin).transpose(0, 2, 1)
        if stride == 1:
            gp = k - 1 - pad
            gpad = np.pad(g_l, ((0, 0), (gp, gp), (0, 0))) if gp else g_l
            gcols = cols_of(gpad)
            wf = w.value[:, :, ::-1].transpose(2, 0, 1).reshape(-1, cin)
            gx_l = (gcols @ np.ascontiguousarray(wf)).reshape(n, length, cin)
            x._accum(np.ascontiguousarray(gx_l.transpose(0, 2, 1)))
        else:
            gtmp = (g_mat @ w_mat).reshape(n, lout, k, cin)
            gxp_l = np.zeros(xl.shape, dtype=g.dtype)
            for off in range(k):
                sl = slice(off, off + stride * (lout - 1) + 1, stride)
                gxp_l[:, sl, :] += gtmp[:, :, off, :]
            crop = gxp_l[:, pad : pad + length, :] if pad else gxp_l
            x._accum(np.ascontiguousarray(crop.transpose(0, 2, 1)))
        w._accum(gw)

    return x.graph._node(out_val, backward)


def conv_transpose1d(x: Tensor, w: Tensor, stride: int = 2, pad: int = 1) -> Tensor:
    """Transposed 1-d convolution, x (N, Cin, L), w (Cin, Cout, K).

    Output length is (L - 1) * stride - 2 pad + K; with the default K=4,
    stride 2, pad 1 it exactly doubles L.
    """
    w = _wrap(x.graph, w)
    n, cin, length = x.value.shape
    cin2, cout, k = w.value.shape
    if cin != cin2:
        raise ValueError("conv_transpose1d channel mismatch")
    lout = (length - 1) * stride - 2 * pad + k
    xl = np.ascontiguousarray(x.value.transpose(0, 2, 1))  # (N, L, Cin)
    x_mat = xl.reshape(-1, cin)
    w_mat = w.value.reshape(cin, -1)  # columns (Cout, K)
    big = (x_mat @ w_mat).reshape(n, length, cout, k)
    out_l = np.zeros((n, lout, cout), dtype=big.dtype)
    placements = []
    for off in range(k):
        dst = np.arange(length) * stride + off - pad
        keep = (dst >= 0) & (dst < lout)
        placements.append((dst[keep], keep))
        out_l[:, dst[keep], :] += big[:, :, :, off][:, keep]
    out_val = np.ascontiguousarray(out_l.transpose(0, 2, 1))

    def backward(g):
        # both input and weight gradients read g through the same strided
        # window gather
        g_l = np.ascontiguousarray(g.transpose(0, 2, 1))  # (N, Lout, Cout)
        gpad = np.pad(g_l, ((0, 0), (pad, pad), (0, 0))) if pad else g_l
        win = np.lib.stride_tricks.sliding_window_view(gpad, k, axis=1)[:, ::stride]
        gcols = np.ascontiguousarray(win.transpose(0, 1, 3, 2).reshape(n * length, -1))
        wf = w.value.transpose(2, 1, 0).reshape(-1, cin)  # rows (K, Cout)
        gx_l = (gcols @ np.ascontiguousarray(wf)).reshape(n, length, cin)
        x._accum(np.ascontiguousarray(gx_l.transpose(0, 2, 1)))
        gw = (x_mat.T @ gcols).reshape(cin, k, cout).transpose(0, 2, 1)
        w._accum(np.ascontiguousarray(gw))

    return x.graph._node(out_val, backward)


def conv3d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """3-d convolution, x (N, Cin, D, H, W), w (Cout, Cin, K, K, K).

    Lowered to one patch-matrix product. Patches are gathered channels-last
    (windows then stay contiguous) and rebuilt in the backward pass instead
    of being kept alive with the node.
    """
    w = _wrap(x.graph, w)
    n, cin, d, h, wd = x.value.shape
    cout, cin2, k, _, _ = w.value.shape
    if cin != cin2:
        raise ValueError("conv3d channel mismatch")
    xp = np.pad(x.value, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x.value
    xl = np.ascontiguousarray(xp.transpose(0, 2, 3, 4, 1))  # (N, Dp, Hp, Wp, Cin)
    od = (d + 2 * pad - k) // stride + 1
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1

    def cols_of(arr):  # (N, D', H', W', C) -> (N * voxels, k^3 C), offset-major
        m, c = arr.shape[0], arr.shape[4]
        if stride == k and pad == 0 and all(s % k == 0 for s in arr.shape[1:4]):
            # non-overlapping patches: the gather is a plain reshape
            a1, a2, a3 = arr.shape[1] // k, arr.shape[2] // k, arr.shape[3] // k
            r = arr.reshape(m, a1, k, a2, k, a3, k, c).transpose(0, 1, 3, 5, 2, 4, 6, 7)
            return np.ascontiguousarray(r.reshape(m * a1 * a2 * a3, -1))
        win = np.lib.stride_tricks.sliding_window_view(arr, (k, k, k), axis=(1, 2, 3))
        win = win[:, ::stride, ::stride, ::stride]  # (N, od, oh, ow, C, k, k, k)
        cols = win.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(m * od * oh * ow, -1)
        return np.ascontiguousarray(cols)

    w_mat = np.ascontiguousarray(w.value.transpose(0, 2, 3, 4, 1).reshape(cout, -1))
    out_val = (cols_of(xl) @ w_mat.T).reshape(n, od, oh, ow, cout)
    out_val = np.ascontiguousarray(out_val.transpose(0, 4, 1, 2, 3))

    def backward(g):
        g_l = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1))  # (N, od, oh, ow, Cout)
        g_mat = g_l.reshape(-1, cout)
        gw = (g_mat.T @ cols_of(xl)).reshape(cout, k, k, k, cin).transpose(0, 4, 1, 2, 3)
        if stride == 1:
            # input gradient is a correlation of g with the flipped kernel
            gp = k - 1 - pad
            gpad = np.pad(g_l, ((0, 0), (gp, gp), (gp, gp), (gp, gp), (0, 0))) if gp else g_l
            win = np.lib.stride_tricks.sliding_window_view(gpad, (k, k, k), axis=(1, 2, 3))
            gcols = np.ascontiguousarray(
                win.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(n * d * h * wd, -1)
            )
            wf = w.value[:, :, ::-1, ::-1, ::-1].transpose(2, 3, 4, 0, 1).reshape(-1, cin)
            gx_l = (gcols @ np.ascontiguousarray(wf)).reshape(n, d, h, wd, cin)
            x._accum(np.ascontiguousarray(gx_l.transpose(0, 4, 1, 2, 3)))
        elif stride == k and pad == 0 and d % k == 0 and h % k == 0 and wd % k == 0:
            gtmp = (g_mat @ w_mat).reshape(n, od, oh, ow, k, k, k, cin)
            gx_l = gtmp.transpose(0, 1, 4, 2, 5, 3, 6, 7).reshape(xl.shape)
            x._accum(np.ascontiguousarray(gx_l.transpose(0, 4, 1, 2, 3)))
        else:
            gtmp = (g_mat @ w_mat).reshape(n, od, oh, ow, k, k, k, cin)
            gxp_l = np.zeros(xl.shape, dtype=g.dtype)
            for a in range(k):
                for b in range(k):
                    for c in range(k):
                        sl = (
                            slice(a, a + stride * (od - 1) + 1, stride),
                            slice(b, b + stride * (oh - 1) + 1, stride),
                            slice(c, c + stride * (ow - 1) + 1, stride),
                        )
                        gxp_l[:, sl[0], sl[1], sl[2], :] += gtmp[:, :, :, :, a, b, c, :]
            crop = gxp_l[:, pad : pad + d, pad : pad + h, pad : pad + wd, :] if pad else gxp_l
            x._accum(np.ascontiguousarray(crop.transpose(0, 4, 1, 2, 3)))
        w._accum(gw)

    return x.graph._node(out_val, backward)
