"""Graph nodes and the primitive operation set.

A :class:`Node` holds an immutable float64 array (its memoized forward value)
together with the primitive that produced it and references to its parents.
Values are computed eagerly when a node is created, so a graph is always fully
bound.  Each primitive carries two derivative rules:

* ``vjp`` builds the vector-Jacobian product *out of other primitives*, so a
  backward pass run while recording is itself a differentiable graph;
* ``jvp`` pushes a tangent forward on plain arrays.
"""

import threading
from contextlib import contextmanager

import numpy as np

from llr.autodiff import kernels
from llr.errors import ShapeError

_state = threading.local()


def is_recording():
    return getattr(_state, "recording", True)


@contextmanager
def no_record():
    """Create nodes without parent links inside the block (plain evaluation)."""
    prev = is_recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


def _freeze(value, copy=True):
    arr = np.array(value, dtype=np.float64) if copy else np.asarray(value, dtype=np.float64)
    if arr.flags.writeable:
        arr.flags.writeable = False
    return arr


class Node:
    """One vertex of a recorded computation."""

    __slots__ = ("value", "op", "parents", "attrs", "name")
    __array_ufunc__ = None  # make ndarray defer to our reflected operators

    def __init__(self, value, op=None, parents=(), attrs=None, name=None):
        self.value = value
        self.op = op
        self.parents = parents
        self.attrs = attrs or {}
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def is_leaf(self):
        return self.op is None

    def __repr__(self):
        kind = "leaf" if self.op is None else self.op.name
        label = f" {self.name!r}" if self.name else ""
        return f"Node<{kind}{label} shape={list(self.shape)}>"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def leaf(value, name=None):
    """A bound input node (something gradients may be taken with respect to)."""
    if isinstance(value, Node):
        value = value.value
    return Node(_freeze(value), name=name)


const = leaf


def as_node(x):
    return x if isinstance(x, Node) else leaf(x)


def detach(x):
    return Node(as_node(x).value)


class Op:
    def __init__(self, name, forward, vjp, jvp):
        self.name = name
        self.forward = forward
        self.vjp = vjp
        self.jvp = jvp

    def __repr__(self):
        return f"Op({self.name})"


OPS = {}


def _register(name, forward, vjp, jvp):
    op = Op(name, forward, vjp, jvp)
    OPS[name] = op
    return op


def _apply(op, parents, **attrs):
    value = _freeze(op.forward(*(p.value for p in parents), **attrs), copy=False)
    if not is_recording():
        return Node(value)
    return Node(value, op, tuple(parents), attrs)


# ------------------------------------------------------------- elementwise


def _bshape(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, a.shape, b.shape, detail="not broadcastable") from None


def _t(tangents, i, like):
    t = tangents[i]
    return np.zeros(like.shape) if t is None else t


def _add_vjp(node, g, needs):
    a, b = node.parents
    return (sum_to(g, a.shape) if needs[0] else None, sum_to(g, b.shape) if needs[1] else None)


def _add_jvp(node, tangents):
    out = np.zeros(node.shape)
    for t in tangents:
        if t is not None:
            out = out + t
    return out


def _sub_vjp(node, g, needs):
    a, b = node.parents
    return (sum_to(g, a.shape) if needs[0] else None, sum_to(neg(g), b.shape) if needs[1] else None)


def _sub_jvp(node, tangents):
    a, b = node.parents
    return np.broadcast_to(_t(tangents, 0, a) - _t(tangents, 1, b), node.shape)


def _mul_vjp(node, g, needs):
    a, b = node.parents
    return (sum_to(g * b, a.shape) if needs[0] else None, sum_to(g * a, b.shape) if needs[1] else None)


def _mul_jvp(node, tangents):
    a, b = node.parents
    out = np.zeros(node.shape)
    if tangents[0] is not None:
        out = out + tangents[0] * b.value
    if tangents[1] is not None:
        out = out + a.value * tangents[1]
    return out


def _div_vjp(node, g, needs):
    a, b = node.parents
    ga = sum_to(g / b, a.shape) if needs[0] else None
    gb = sum_to(neg(g * node / b), b.shape) if needs[1] else None
    return ga, gb


def _div_jvp(node, tangents):
    a, b = node.parents
    out = np.zeros(node.shape)
    if tangents[0] is not None:
        out = out + tangents[0] / b.value
    if tangents[1] is not None:
        out = out - node.value * tangents[1] / b.value
    return out


_ADD = _register("add", np.add, _add_vjp, _add_jvp)
_SUB = _register("sub", np.subtract, _sub_vjp, _sub_jvp)
_MUL = _register("mul", np.multiply, _mul_vjp, _mul_jvp)
_DIV = _register("div", np.divide, _div_vjp, _div_jvp)
_NEG = _register("neg", np.negative, lambda n, g, needs: (neg(g),), lambda n, t: -t[0])


def add(a, b):
    a, b = as_node(a), as_node(b)
    _bshape("add", a, b)
    return _apply(_ADD, (a, b))


def sub(a, b):
    a, b = as_node(a), as_node(b)
    _bshape("sub", a, b)
    return _apply(_SUB, (a, b))


def mul(a, b):
    a, b = as_node(a), as_node(b)
    _bshape("mul", a, b)
    return _apply(_MUL, (a, b))


def div(a, b):
    a, b = as_node(a), as_node(b)
    _bshape("div", a, b)
    return _apply(_DIV, (a, b))


def neg(a):
    return _apply(_NEG, (as_node(a),))


def _softplus_fwd(a):
    return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))


def _sigmoid_fwd(a):
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


_SOFTPLUS = _register(
    "softplus",
    _softplus_fwd,
    lambda n, g, needs: (g * sigmoid(n.parents[0]),),
    lambda n, t: t[0] * _sigmoid_fwd(n.parents[0].value),
)
_SIGMOID = _register(
    "sigmoid",
    _sigmoid_fwd,
    lambda n, g, needs: (g * n * (1.0 - n),),
    lambda n, t: t[0] * n.value * (1.0 - n.value),
)
_EXP = _register("exp", np.exp, lambda n, g, needs: (g * n,), lambda n, t: t[0] * n.value)
_LOG = _register("log", np.log, lambda n, g, needs: (g / n.parents[0],), lambda n, t: t[0] / n.parents[0].value)
_ABS = _register(
    "abs",
    np.abs,
    lambda n, g, needs: (g * np.sign(n.parents[0].value),),
    lambda n, t: t[0] * np.sign(n.parents[0].value),
)


def softplus(a):
    """log(1 + exp(a)), evaluated as max(a, 0) + log1p(exp(-|a|))."""
    return _apply(_SOFTPLUS, (as_node(a),))


def sigmoid(a):
    return _apply(_SIGMOID, (as_node(a),))


def exp(a):
    return _apply(_EXP, (as_node(a),))


def log(a):
    return _apply(_LOG, (as_node(a),))


def abs_(a):
    """Absolute value; the derivative at 0 is taken as 0."""
    return _apply(_ABS, (as_node(a),))


# ----------------------------------------------------------- linear algebra


def _matmul_vjp(node, g, needs):
    a, b = node.parents
    return (g @ transpose(b) if needs[0] else None, transpose(a) @ g if needs[1] else None)


def _matmul_jvp(node, tangents):
    a, b = node.parents
    out = np.zeros(node.shape)
    if tangents[0] is not None:
        out = out + tangents[0] @ b.value
    if tangents[1] is not None:
        out = out + a.value @ tangents[1]
    return out


def _transpose_fwd(a, axes):
    return np.ascontiguousarray(np.transpose(a, axes))


_MATMUL = _register("matmul", np.matmul, _matmul_vjp, _matmul_jvp)
_TRANSPOSE = _register(
    "transpose",
    _transpose_fwd,
    lambda n, g, needs: (transpose(g, tuple(np.argsort(n.attrs["axes"]))),),
    lambda n, t: _transpose_fwd(t[0], n.attrs["axes"]),
)


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape, detail="expected (m,k) @ (k,n)")
    return _apply(_MATMUL, (a, b))


def transpose(a, axes=None):
    a = as_node(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    return _apply(_TRANSPOSE, (a,), axes=axes)


# --------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _keep_shape(shape, axes):
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def _sum_vjp(node, g, needs):
    a = node.parents[0]
    gk = reshape(g, _keep_shape(a.shape, node.attrs["axes"]))
    return (broadcast_to(gk, a.shape),)


_SUM = _register(
    "sum",
    lambda a, axes, keepdims: np.sum(a, axis=axes, keepdims=keepdims),
    _sum_vjp,
    lambda n, t: np.sum(t[0], axis=n.attrs["axes"], keepdims=n.attrs["keepdims"]),
)


def sum_(a, axis=None, keepdims=False):
    a = as_node(a)
    return _apply(_SUM, (a,), axes=_norm_axes(axis, a.ndim), keepdims=keepdims)


def _argmax_mask(a, axis):
    idx = np.expand_dims(np.argmax(a, axis=axis), axis)
    mask = np.zeros(a.shape)
    np.put_along_axis(mask, idx, 1.0, axis=axis)
    return mask


def _max_vjp(node, g, needs):
    a = node.parents[0]
    axis = node.attrs["axis"]
    gk = broadcast_to(reshape(g, _keep_shape(a.shape, (axis,))), a.shape)
    return (gk * _argmax_mask(a.value, axis),)


def _max_jvp(node, tangents):
    a = node.parents[0]
    axis = node.attrs["axis"]
    idx = np.expand_dims(np.argmax(a.value, axis=axis), axis)
    out = np.take_along_axis(tangents[0], idx, axis=axis)
    return out if node.attrs["keepdims"] else np.squeeze(out, axis)


_MAX = _register(
    "max",
    lambda a, axis, keepdims: np.max(a, axis=axis, keepdims=keepdims),
    _max_vjp,
    _max_jvp,
)


def max_(a, axis=-1, keepdims=False):
    """Maximum along one axis; ties route the gradient to the first maximizer."""
    a = as_node(a)
    return _apply(_MAX, (a,), axis=axis % a.ndim, keepdims=keepdims)


def _lse_fwd(a, axis, keepdims):
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis)


def _lse_vjp(node, g, needs):
    a = node.parents[0]
    keep = _keep_shape(a.shape, (node.attrs["axis"],))
    soft = exp(a - broadcast_to(reshape(node, keep), a.shape))
    return (broadcast_to(reshape(g, keep), a.shape) * soft,)


def _lse_jvp(node, tangents):
    a = node.parents[0]
    axis = node.attrs["axis"]
    lse = _lse_fwd(a.value, axis, True)
    out = np.sum(np.exp(a.value - lse) * tangents[0], axis=axis, keepdims=True)
    return out if node.attrs["keepdims"] else np.squeeze(out, axis)


_LSE = _register("logsumexp", _lse_fwd, _lse_vjp, _lse_jvp)


def logsumexp(a, axis=-1, keepdims=False):
    a = as_node(a)
    return _apply(_LSE, (a,), axis=axis % a.ndim, keepdims=keepdims)


# ------------------------------------------------------------ shape plumbing


_RESHAPE = _register(
    "reshape",
    lambda a, shape: np.reshape(a, shape),
    lambda n, g, needs: (reshape(g, n.parents[0].shape),),
    lambda n, t: np.reshape(t[0], n.shape),
)


def reshape(a, shape):
    a = as_node(a)
    target = tuple(int(s) for s in shape)
    if -1 in target:
        known = int(np.prod([s for s in target if s != -1]))
        if target.count(-1) > 1 or known == 0 or a.size % known:
            raise ShapeError("reshape", a.shape, target)
        target = tuple(a.size // known if s == -1 else s for s in target)
    if int(np.prod(target)) != a.size:
        raise ShapeError("reshape", a.shape, target)
    if target == a.shape:
        return a
    return _apply(_RESHAPE, (a,), shape=target)


def _bcast_fwd(a, shape):
    return np.ascontiguousarray(np.broadcast_to(a, shape))


def _sum_to_fwd(a, shape):
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1)
    out = np.sum(a, axis=axes, keepdims=True) if axes else a
    return np.reshape(out, shape)


_BROADCAST = _register(
    "broadcast",
    _bcast_fwd,
    lambda n, g, needs: (sum_to(g, n.parents[0].shape),),
    lambda n, t: _bcast_fwd(t[0], n.shape),
)
_SUM_TO = _register(
    "sum_to",
    _sum_to_fwd,
    lambda n, g, needs: (broadcast_to(g, n.parents[0].shape),),
    lambda n, t: _sum_to_fwd(t[0], n.shape),
)


def broadcast_to(a, shape):
    a = as_node(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        np.broadcast_shapes(a.shape, shape)
    except ValueError:
        raise ShapeError("broadcast", a.shape, shape) from None
    return _apply(_BROADCAST, (a,), shape=shape)


def sum_to(a, shape):
    """Sum out broadcast dimensions so the result has ``shape``."""
    a = as_node(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _apply(_SUM_TO, (a,), shape=shape)


def _slice_fwd(a, index):
    return np.ascontiguousarray(a[index])


def _pad_slice_fwd(g, index, shape):
    out = np.zeros(shape)
    out[index] = g
    return out


_SLICE = _register(
    "slice",
    _slice_fwd,
    lambda n, g, needs: (pad_slice(g, n.attrs["index"], n.parents[0].shape),),
    lambda n, t: _slice_fwd(t[0], n.attrs["index"]),
)
_PAD_SLICE = _register(
    "pad_slice",
    _pad_slice_fwd,
    lambda n, g, needs: (slice_(g, n.attrs["index"]),),
    lambda n, t: _pad_slice_fwd(t[0], n.attrs["index"], n.attrs["shape"]),
)


def _check_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    for item in items:
        if not (item is Ellipsis or item is None or isinstance(item, (int, np.integer, slice))):
            raise TypeError(f"slice: only basic indexing is supported, got {type(item).__name__}")
    return index


def slice_(a, index):
    a = as_node(a)
    return _apply(_SLICE, (a,), index=_check_basic_index(index))


def pad_slice(g, index, shape):
    """Adjoint of :func:`slice_`: embed ``g`` at ``index`` inside zeros of ``shape``."""
    return _apply(_PAD_SLICE, (as_node(g),), index=index, shape=tuple(shape))


# -------------------------------------------------------------- convolution


def _conv_vjp(node, g, needs):
    x, w = node.parents
    s, p = node.attrs["stride"], node.attrs["pad"]
    gx = conv2d_input_grad(g, w, x.shape, s, p) if needs[0] else None
    gw = conv2d_weight_grad(x, g, w.shape, s, p) if needs[1] else None
    return gx, gw


def _conv_jvp(node, tangents):
    x, w = node.parents
    s, p = node.attrs["stride"], node.attrs["pad"]
    out = np.zeros(node.shape)
    if tangents[0] is not None:
        out = out + kernels.conv2d(tangents[0], w.value, s, p)
    if tangents[1] is not None:
        out = out + kernels.conv2d(x.value, tangents[1], s, p)
    return out


def _conv_in_vjp(node, g, needs):
    gy, w = node.parents
    s, p = node.attrs["stride"], node.attrs["pad"]
    d_gy = conv2d(g, w, s, p) if needs[0] else None
    d_w = conv2d_weight_grad(g, gy, w.shape, s, p) if needs[1] else None
    return d_gy, d_w


def _conv_in_jvp(node, tangents):
    gy, w = node.parents
    s, p, shp = node.attrs["stride"], node.attrs["pad"], node.attrs["in_shape"]
    out = np.zeros(node.shape)
    if tangents[0] is not None:
        out = out + kernels.conv2d_input_grad(tangents[0], w.value, shp, s, p)
    if tangents[1] is not None:
        out = out + kernels.conv2d_input_grad(gy.value, tangents[1], shp, s, p)
    return out


def _conv_w_vjp(node, g, needs):
    x, gy = node.parents
    s, p = node.attrs["stride"], node.attrs["pad"]
    d_x = conv2d_input_grad(gy, g, x.shape, s, p) if needs[0] else None
    d_gy = conv2d(x, g, s, p) if needs[1] else None
    return d_x, d_gy


def _conv_w_jvp(node, tangents):
    x, gy = node.parents
    s, p, shp = node.attrs["stride"], node.attrs["pad"], node.attrs["w_shape"]
    out = np.zeros(node.shape)
    if tangents[0] is not None:
        out = out + kernels.conv2d_weight_grad(tangents[0], gy.value, shp, s, p)
    if tangents[1] is not None:
        out = out + kernels.conv2d_weight_grad(x.value, tangents[1], shp, s, p)
    return out


_CONV = _register(
    "conv2d", lambda x, w, stride, pad: kernels.conv2d(x, w, stride, pad), _conv_vjp, _conv_jvp
)
_CONV_IN = _register(
    "conv2d_input_grad",
    lambda g, w, in_shape, stride, pad: kernels.conv2d_input_grad(g, w, in_shape, stride, pad),
    _conv_in_vjp,
    _conv_in_jvp,
)
_CONV_W = _register(
    "conv2d_weight_grad",
    lambda x, g, w_shape, stride, pad: kernels.conv2d_weight_grad(x, g, w_shape, stride, pad),
    _conv_w_vjp,
    _conv_w_jvp,
)


def conv2d(x, w, stride=1, pad=0):
    """Batched 2-D cross-correlation: x (N,C,H,W), w (O,C,kh,kw) -> (N,O,Ho,Wo)."""
    x, w = as_node(x), as_node(w)
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape, detail="expected (N,C,H,W) and (O,C,kh,kw)")
    ho, wo = kernels.conv_output_hw(x.shape[2], x.shape[3], w.shape[2], w.shape[3], stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    return _apply(_CONV, (x, w), stride=int(stride), pad=int(pad))


def conv2d_input_grad(g, w, in_shape, stride, pad):
    return _apply(_CONV_IN, (as_node(g), as_node(w)), in_shape=tuple(in_shape), stride=stride, pad=pad)


def conv2d_weight_grad(x, g, w_shape, stride, pad):
    return _apply(_CONV_W, (as_node(x), as_node(g)), w_shape=tuple(w_shape), stride=stride, pad=pad)
