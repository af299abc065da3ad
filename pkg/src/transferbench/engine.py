"""Reverse-mode automatic differentiation over dense float64 tensors.

A ``Tape`` records primitive operations in execution order; ``backward``
replays them in exact reverse, accumulating vector-Jacobian products.  Ops
accept ``Tensor`` operands or plain arrays/scalars (treated as constants that
receive no gradient).  Tensors with no tape node are immutable constants and
safe to share across threads; a tape belongs to exactly one forward/backward
pass.

Backward-modification hooks alter local derivatives at labeled operations:
``scale_branch_grad`` multiplies the gradient flowing through a labeled
tensor by a factor gamma, ``identity_relu_grad`` and ``softplus_relu_grad``
replace the ReLU derivative in labeled layers, ``skip_attention_grad`` stops
gradient propagation through a labeled tensor (it is treated as a constant
during backward), and ``capture_forward`` stores a detached copy of the
labeled tensor's forward value on the tape.  Hooks never change forward
results.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EngineError", "ShapeError", "TapeReuseError", "HookError",
    "HookDescriptor", "Hooks", "Tape", "Tensor",
    "forward", "backward", "check_gradient", "backward_call_count",
    "add", "sub", "mul", "neg", "matmul", "conv2d", "relu", "gelu",
    "softplus", "exp", "log", "sqrt", "absolute", "signed_pow",
    "sum_", "mean", "max_pool2", "avg_pool", "layer_norm", "softmax",
    "log_softmax", "bilinear_resize", "pad2d", "translate2d", "clip",
    "where", "gather_rows", "take_index", "reshape", "transpose", "concat",
    "stack", "broadcast_to", "mark", "stop_gradient",
]

HOOK_KINDS = (
    "scale_branch_grad",
    "identity_relu_grad",
    "softplus_relu_grad",
    "skip_attention_grad",
    "capture_forward",
)


class EngineError(Exception):
    pass


class ShapeError(EngineError):
    def __init__(self, op, lhs, rhs):
        self.op, self.lhs, self.rhs = op, tuple(lhs), tuple(rhs)
        super().__init__(f"{op}: incompatible shapes {self.lhs} vs {self.rhs}")


class TapeReuseError(EngineError):
    pass


class HookError(EngineError):
    pass


@dataclass(frozen=True)
class HookDescriptor:
    """One backward-modification or capture request for a set of layer labels."""

    kind: str
    layer_labels: frozenset
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in HOOK_KINDS:
            raise HookError(f"unknown hook kind {self.kind!r}")
        object.__setattr__(self, "layer_labels", frozenset(self.layer_labels))
        if self.kind == "scale_branch_grad":
            if self.gamma is None or not (0.0 < self.gamma <= 1.0):
                raise HookError(f"scale_branch_grad needs gamma in (0, 1], got {self.gamma}")


class Hooks:
    """Resolved hook registry attached to a single tape."""

    __slots__ = ("scale", "identity_relu", "softplus_relu", "skip_attention", "capture")

    def __init__(self, descriptors=()):
        self.scale = {}
        self.identity_relu = set()
        self.softplus_relu = set()
        self.skip_attention = set()
        self.capture = set()
        for d in descriptors:
            if d.kind == "scale_branch_grad":
                for lbl in d.layer_labels:
                    self.scale[lbl] = d.gamma
            elif d.kind == "identity_relu_grad":
                self.identity_relu |= d.layer_labels
            elif d.kind == "softplus_relu_grad":
                self.softplus_relu |= d.layer_labels
            elif d.kind == "skip_attention_grad":
                self.skip_attention |= d.layer_labels
            elif d.kind == "capture_forward":
                self.capture |= d.layer_labels


_EMPTY_HOOKS = Hooks()

# Incremented once per backward() call; used by tests to assert that a method
# and its fair baseline perform the same number of backpropagations.
_BACKWARD_CALLS = contextvars.ContextVar("backward_calls", default=0)


def backward_call_count() -> int:
    return _BACKWARD_CALLS.get()


class _Node:
    __slots__ = ("op", "parents", "bwd")

    def __init__(self, op, parents, bwd):
        self.op = op
        self.parents = parents
        self.bwd = bwd


class Tape:
    """Ordered op record for one forward/backward pass."""

    def __init__(self, hooks: Hooks | None = None):
        self.nodes: list[_Node] = []
        self.hooks = hooks if hooks is not None else _EMPTY_HOOKS
        self.captures: dict[str, np.ndarray] = {}
        self.output: "Tensor | None" = None
        self._closed = False

    def leaf(self, data, name="leaf") -> "Tensor":
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise EngineError(f"non-finite values in leaf {name!r}")
        return self._record(name, arr, (), lambda g: ())

    def _record(self, op, data, parents, bwd) -> "Tensor":
        if self._closed:
            raise TapeReuseError("tape already consumed by backward()")
        self.nodes.append(_Node(op, parents, bwd))
        return Tensor(data, self, len(self.nodes) - 1)

    @property
    def arithmetic_count(self) -> int:
        return sum(1 for n in self.nodes if n.op != "leaf")


class Tensor:
    """Dense float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape=None, node=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(v)


def _tape_of(*tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise EngineError("operands belong to different tapes")
    return tape


def _emit(op, data, inputs, grad_fns, tape=None):
    """Record one op. grad_fns[i] maps output grad -> grad for inputs[i]."""
    tape = tape if tape is not None else _tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    parents, fns = [], []
    for t, fn in zip(inputs, grad_fns):
        if t.node is not None:
            parents.append(t.node)
            fns.append(fn)

    def bwd(g):
        return tuple(fn(g) for fn in fns)

    return tape._record(op, data, tuple(parents), bwd)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# elementwise and reduction ops

def add(a, b):
    a, b = _coerce(a), _coerce(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape)
    return _emit("add", data, (a, b),
                 (lambda g: _unbroadcast(g, a.data.shape),
                  lambda g: _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape)
    return _emit("sub", data, (a, b),
                 (lambda g: _unbroadcast(g, a.data.shape),
                  lambda g: _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape)
    return _emit("mul", data, (a, b),
                 (lambda g: _unbroadcast(g * b.data, a.data.shape),
                  lambda g: _unbroadcast(g * a.data, b.data.shape)))


def neg(a):
    a = _coerce(a)
    return _emit("neg", -a.data, (a,), (lambda g: -g,))


def exp(a):
    a = _coerce(a)
    data = np.exp(a.data)
    return _emit("exp", data, (a,), (lambda g: g * data,))


def log(a):
    a = _coerce(a)
    return _emit("log", np.log(a.data), (a,), (lambda g: g / a.data,))


def sqrt(a):
    a = _coerce(a)
    data = np.sqrt(a.data)
    return _emit("sqrt", data, (a,), (lambda g: g * 0.5 / data,))


def absolute(a):
    a = _coerce(a)
    return _emit("abs", np.abs(a.data), (a,), (lambda g: g * np.sign(a.data),))


def signed_pow(a, alpha: float):
    """sign(x) * |x|**alpha, derivative alpha * |x|**(alpha-1)."""
    a = _coerce(a)
    mag = np.abs(a.data)
    data = np.sign(a.data) * mag**alpha
    return _emit("signed_pow", data, (a,),
                 (lambda g: g * alpha * np.maximum(mag, 1e-300) ** (alpha - 1.0),))


def sum_(a, axis=None, keepdims=False):
    a = _coerce(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.data.shape).copy()

    return _emit("sum", data, (a,), (grad,))


def mean(a, axis=None, keepdims=False):
    a = _coerce(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def grad(g):
        g = np.asarray(g, dtype=np.float64) / count
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.data.shape).copy()

    return _emit("mean", data, (a,), (grad,))


def clip(a, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient passes where lo <= x <= hi (inclusive)."""
    a = _coerce(a)
    data = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clip", data, (a,), (lambda g: g * inside,))


def where(cond, a, b):
    """Elementwise select; cond is a constant boolean mask."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _coerce(a), _coerce(b)
    data = np.where(cond, a.data, b.data)
    return _emit("where", data, (a, b),
                 (lambda g: _unbroadcast(g * cond, a.data.shape),
                  lambda g: _unbroadcast(g * ~cond, b.data.shape)))


# ---------------------------------------------------------------------------
# activations

def relu(a, label=None):
    a = _coerce(a)
    data = np.maximum(a.data, 0.0)
    tape = _tape_of(a)
    hooks = tape.hooks if tape is not None else _EMPTY_HOOKS
    if label is not None and label in hooks.identity_relu:
        grad = lambda g: g
    elif label is not None and label in hooks.softplus_relu:
        x = a.data
        grad = lambda g: g * _sigmoid(x)
    else:
        pos = a.data > 0
        grad = lambda g: g * pos
    return _emit("relu", data, (a,), (grad,), tape=tape)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(a):
    """tanh-form GELU."""
    a = _coerce(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def grad(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner)

    return _emit("gelu", data, (a,), (grad,))


def softplus(a):
    a = _coerce(a)
    x = a.data
    data = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)
    return _emit("softplus", data, (a,), (lambda g: g * _sigmoid(x),))


def softmax(a, axis=-1):
    a = _coerce(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", s, (a,),
                 (lambda g: s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1):
    a = _coerce(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse
    sm = np.exp(data)
    return _emit("log_softmax", data, (a,),
                 (lambda g: g - sm * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------------------
# linear algebra and convolution

def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    data = np.matmul(a.data, b.data)

    def grad_a(g):
        gb = np.swapaxes(b.data, -1, -2) if b.ndim > 1 else b.data[None, :]
        return _unbroadcast(np.matmul(g, gb), a.data.shape)

    def grad_b(g):
        ga = np.swapaxes(a.data, -1, -2) if a.ndim > 1 else a.data[:, None]
        return _unbroadcast(np.matmul(ga, g), b.data.shape)

    return _emit("matmul", data, (a, b), (grad_a, grad_b))


def conv2d(x, w, stride: int = 1, pad: int = 0):
    """NCHW convolution (cross-correlation) with square stride/padding.

    Columns are built kernel-offset by kernel-offset with slab copies (the
    inner rows stay contiguous), which is much faster here than a strided
    6-D transpose.
    """
    x, w = _coerce(x), _coerce(w)
    if x.ndim != 4 or w.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    f, cin, kh, kw = w.data.shape
    n, _, h, wd = x.data.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    cols = np.empty((cin, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + ho * stride:stride,
                               j:j + wo * stride:stride].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(cin * kh * kw, n * ho * wo)
    out2 = w.data.reshape(f, -1) @ cols2                  # (f, n*ho*wo)
    data = np.ascontiguousarray(
        out2.reshape(f, n, ho, wo).transpose(1, 0, 2, 3))

    def grad_x(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, -1)
        gcols = (w.data.reshape(f, -1).T @ g2).reshape(cin, kh, kw, n, ho, wo)
        gx = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                    gcols[:, i, j].transpose(1, 0, 2, 3)
        return gx[:, :, pad:pad + h, pad:pad + wd] if pad else gx

    def grad_w(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, -1)
        return (g2 @ cols2.T).reshape(f, cin, kh, kw)

    return _emit("conv2d", data, (x, w), (grad_x, grad_w))


def max_pool2(x):
    """2x2 max pooling with stride 2; spatial dims must be even.

    Ties within a window route the gradient to the first element in row-major
    window order (argmax convention), keeping backward deterministic.
    """
    x = _coerce(x)
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError("max_pool2", x.shape, (n, c, 2, 2))
    quads = (x.data[:, :, 0::2, 0::2], x.data[:, :, 0::2, 1::2],
             x.data[:, :, 1::2, 0::2], x.data[:, :, 1::2, 1::2])
    data = quads[0].copy()
    idx = np.zeros(data.shape, dtype=np.int8)
    for k in (1, 2, 3):
        better = quads[k] > data
        np.copyto(data, quads[k], where=better)
        np.copyto(idx, np.int8(k), where=better)

    def grad(g):
        gx = np.zeros((n, c, h, w))
        gx[:, :, 0::2, 0::2] = np.where(idx == 0, g, 0.0)
        gx[:, :, 0::2, 1::2] = np.where(idx == 1, g, 0.0)
        gx[:, :, 1::2, 0::2] = np.where(idx == 2, g, 0.0)
        gx[:, :, 1::2, 1::2] = np.where(idx == 3, g, 0.0)
        return gx

    return _emit("max_pool2", data, (x,), (grad,))


def avg_pool(x, k: int, stride: int = 1, pad: int = 0):
    """k x k average pooling over NCHW input."""
    x = _coerce(x)
    if x.ndim != 4:
        raise ShapeError("avg_pool", x.shape, (k, k))
    n, c, h, w = x.data.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    data = np.zeros((n, c, ho, wo))
    for i in range(k):
        for j in range(k):
            data += xp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride]
    data /= k * k

    def grad(g):
        gx = np.zeros_like(xp)
        gk = g / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += gk
        return gx[:, :, pad:pad + h, pad:pad + w] if pad else gx

    return _emit("avg_pool", data, (x,), (grad,))


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Normalization over the last axis with affine gain/bias."""
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gain.data * xhat + bias.data

    def grad_x(g):
        gh = g * gain.data
        return inv * (gh - gh.mean(axis=-1, keepdims=True)
                      - xhat * (gh * xhat).mean(axis=-1, keepdims=True))

    def grad_gain(g):
        return _unbroadcast(g * xhat, gain.data.shape)

    def grad_bias(g):
        return _unbroadcast(g, bias.data.shape)

    return _emit("layer_norm", data, (x, gain, bias), (grad_x, grad_gain, grad_bias))


# ---------------------------------------------------------------------------
# geometry: resize / pad / translate / reshape

def _resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic interpolation matrix with half-pixel centers."""
    dst = np.arange(n_out, dtype=np.float64)
    src = np.clip((dst + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for r in range(n_out):
        if hi[r] == lo[r]:
            m[r, lo[r]] = 1.0
        else:
            m[r, lo[r]] = 1.0 - frac[r]
            m[r, hi[r]] = frac[r]
    return m


def bilinear_resize(x, out_h: int, out_w: int):
    """Differentiable bilinear resize of the trailing two axes."""
    x = _coerce(x)
    if x.ndim < 2:
        raise ShapeError("bilinear_resize", x.shape, (out_h, out_w))
    h, w = x.data.shape[-2:]
    rm = _resize_weights(h, out_h)
    cm = _resize_weights(w, out_w)
    lead = x.data.shape[:-2]
    flat = x.data.reshape(-1, h, w)
    data = (rm @ flat @ cm.T).reshape(*lead, out_h, out_w)

    def grad(g):
        gf = g.reshape(-1, out_h, out_w)
        return (rm.T @ gf @ cm).reshape(*lead, h, w)

    return _emit("bilinear_resize", data, (x,), (grad,))


def pad2d(x, top: int, bottom: int, left: int, right: int):
    """Zero-pad the trailing two axes."""
    x = _coerce(x)
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    data = np.pad(x.data, widths)
    h, w = x.data.shape[-2:]

    def grad(g):
        sl = [slice(None)] * (x.ndim - 2) + [slice(top, top + h), slice(left, left + w)]
        return g[tuple(sl)]

    return _emit("pad2d", data, (x,), (grad,))


def translate2d(x, dy: int, dx: int):
    """Shift the trailing two axes by integer offsets, filling with zeros."""
    x = _coerce(x)
    h, w = x.data.shape[-2:]
    if abs(dy) >= h or abs(dx) >= w:
        raise ShapeError("translate2d", x.shape, (dy, dx))

    def shift(arr, sy, sx):
        out = np.zeros_like(arr)
        src_y = slice(max(0, -sy), min(h, h - sy))
        dst_y = slice(max(0, sy), min(h, h + sy))
        src_x = slice(max(0, -sx), min(w, w - sx))
        dst_x = slice(max(0, sx), min(w, w + sx))
        out[..., dst_y, dst_x] = arr[..., src_y, src_x]
        return out

    data = shift(x.data, dy, dx)
    return _emit("translate2d", data, (x,), (lambda g: shift(g, -dy, -dx),))


def reshape(x, shape):
    x = _coerce(x)
    old = x.data.shape
    return _emit("reshape", x.data.reshape(shape), (x,), (lambda g: g.reshape(old),))


def transpose(x, axes):
    x = _coerce(x)
    inv = np.argsort(axes)
    return _emit("transpose", x.data.transpose(axes), (x,),
                 (lambda g: g.transpose(inv),))


def broadcast_to(x, shape):
    x = _coerce(x)
    data = np.broadcast_to(x.data, shape).copy()
    return _emit("broadcast_to", data, (x,), (lambda g: _unbroadcast(g, x.data.shape),))


def concat(parts, axis=0):
    parts = [_coerce(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_grad(i):
        def grad(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]
        return grad

    return _emit("concat", data, tuple(parts), tuple(make_grad(i) for i in range(len(parts))))


def stack(parts, axis=0):
    parts = [_coerce(p) for p in parts]
    data = np.stack([p.data for p in parts], axis=axis)

    def make_grad(i):
        def grad(g):
            return np.take(g, i, axis=axis)
        return grad

    return _emit("stack", data, tuple(parts), tuple(make_grad(i) for i in range(len(parts))))


def take_index(x, index: int, axis: int):
    """Select one slice along an axis: out = x[..., index, ...]."""
    x = _coerce(x)
    data = np.take(x.data, index, axis=axis)

    def grad(g):
        out = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        out[tuple(sl)] = g
        return out

    return _emit("take_index", data, (x,), (grad,))


def gather_rows(x, idx):
    """Pick one element per row: out[i] = x[i, idx[i]]."""
    x = _coerce(x)
    idx = np.asarray(idx, dtype=np.int64)
    n, k = x.data.shape
    if idx.shape != (n,) or idx.min() < 0 or idx.max() >= k:
        raise EngineError(f"gather_rows: bad index array for shape {x.shape}")
    data = x.data[np.arange(n), idx]

    def grad(g):
        out = np.zeros_like(x.data)
        out[np.arange(n), idx] = g
        return out

    return _emit("gather_rows", data, (x,), (grad,))


# ---------------------------------------------------------------------------
# hook sites

def mark(x, label: str):
    """Identity op that is a hook/capture site for the given layer label."""
    x = _coerce(x)
    tape = _tape_of(x)
    hooks = tape.hooks if tape is not None else _EMPTY_HOOKS
    if tape is not None and label in hooks.capture:
        tape.captures[label] = x.data.copy()
    if label in hooks.skip_attention:
        grad = lambda g: None
    elif label in hooks.scale:
        gamma = hooks.scale[label]
        grad = lambda g: g * gamma
    else:
        grad = lambda g: g
    return _emit(f"mark:{label}", x.data, (x,), (grad,), tape=tape)


def stop_gradient(x):
    """Detach: forward identity, no gradient to the input."""
    x = _coerce(x)
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# forward / backward / gradient checking

def forward(graph_fn, inputs, tape: Tape):
    """Run graph_fn on tape-registered leaves; returns the output tensor."""
    leaves = [x if isinstance(x, Tensor) and x.tape is tape
              else tape.leaf(x.data if isinstance(x, Tensor) else x)
              for x in inputs]
    out = graph_fn(*leaves)
    if not isinstance(out, Tensor):
        raise EngineError("graph_fn must return a Tensor")
    if not np.all(np.isfinite(out.data)):
        raise EngineError("non-finite forward output")
    tape.output = out
    return out


def backward(tape: Tape, seed_grad, output: Tensor | None = None, wanted=None):
    """Reverse sweep; returns {node_id: gradient array}.

    With ``wanted`` (a set of node ids) only those gradients are retained,
    which keeps memory flat on long tapes.
    """
    if tape._closed:
        raise TapeReuseError("tape already consumed by backward()")
    out = output if output is not None else tape.output
    if out is None:
        if not tape.nodes:
            raise EngineError("empty tape")
        out_node = len(tape.nodes) - 1
        out_shape = None
    else:
        if out.tape is not tape or out.node is None:
            raise EngineError("output tensor does not belong to this tape")
        out_node = out.node
        out_shape = out.data.shape
    seed = np.asarray(seed_grad, dtype=np.float64)
    if out_shape is not None and seed.shape != out_shape:
        raise ShapeError("backward-seed", seed.shape, out_shape)
    tape._closed = True
    _BACKWARD_CALLS.set(_BACKWARD_CALLS.get() + 1)

    grads: dict[int, np.ndarray] = {out_node: seed}
    for nid in range(out_node, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        for pid, pg in zip(node.parents, node.bwd(g)):
            if pg is None:
                continue
            acc = grads.get(pid)
            grads[pid] = pg if acc is None else acc + pg
        if wanted is not None and nid not in wanted and nid != out_node:
            del grads[nid]
    if wanted is not None:
        grads = {nid: g for nid, g in grads.items() if nid in wanted}
    return grads


def check_gradient(graph_fn, point, h: float, seed: int = 0) -> float:
    """Max relative error between backward() and central finite differences.

    Non-scalar outputs are reduced with a fixed random linear functional so a
    single backward pass checks every output coordinate combination.
    """
    from . import rng

    if h <= 0:
        raise EngineError("h must be positive")
    point = [np.asarray(p, dtype=np.float64) for p in point]

    tape = Tape()
    out = forward(graph_fn, point, tape)
    leaf_ids = [i for i, n in enumerate(tape.nodes) if n.op == "leaf"][:len(point)]
    if out.data.ndim == 0:
        weights = np.asarray(1.0)
    else:
        weights = rng.Stream(seed, "gradcheck").uniform(out.data.shape, -1.0, 1.0)
    grads = backward(tape, weights)

    def f(args):
        t = Tape()
        o = forward(graph_fn, args, t)
        val = float((o.data * weights).sum()) if o.data.ndim else float(o.data)
        if not np.isfinite(val):
            raise EngineError("non-finite evaluation during finite differences")
        return val

    worst = 0.0
    for k, base in enumerate(point):
        analytic = grads.get(leaf_ids[k])
        analytic = np.zeros_like(base) if analytic is None else analytic
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(point)
            flat[i] = orig - h
            fm = f(point)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - fd) / max(1e-12, abs(a), abs(fd))
            worst = max(worst, err)
    return worst
