"""Dense multi-dimensional tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a ``Tensor`` wraps a row-major numpy array,
and every primitive records itself on the active ``Tape`` whenever gradients
are needed. Calling :func:`backward` on a scalar loss walks the tape in
reverse and accumulates ``grad`` arrays on every leaf tensor that requires
gradients. Forward evaluation is deterministic and every primitive checks its
output for NaN/Inf (overflow raises instead of propagating silently).

Primitives can be called as module functions or dispatched by name through
:func:`apply_primitive`.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(Exception):
    """Base class for engine errors."""


class ShapeError(AutodiffError):
    """Operand shapes are incompatible with the requested primitive."""


class NumericsError(AutodiffError):
    """A primitive produced NaN or Inf from finite inputs (overflow, log of
    a non-positive value, ...)."""


class TapeError(AutodiffError):
    """Tape misuse: backward on an empty tape, or a second backward pass."""


def _check_finite(kind, data):
    # min+max propagate NaN and turn +inf/-inf pairs into NaN, so a single
    # scalar test covers every non-finite case without allocating a mask.
    if data.size and not np.isfinite(np.min(data) + np.max(data)):
        raise NumericsError(f"{kind}: non-finite values in output")


class Tensor:
    """A dense real array, optionally tracked for gradients.

    Tensors are immutable after construction except for ``grad``
    accumulation; primitives always allocate fresh output arrays.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        _check_finite("tensor", arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def is_leaf(self):
        return self._backward is None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_TAPE_STACK = []


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Nodes are appended in creation order, so the list is topologically
    sorted by construction. A tape supports exactly one backward pass;
    re-running without re-recording raises :class:`TapeError`.
    """

    __slots__ = ("nodes", "watched", "consumed")

    def __init__(self):
        self.nodes = []
        self.watched = {}  # leaf tensors encountered as inputs, insertion-ordered
        self.consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(kind, data, parents):
    """Create a primitive output, recording it when gradients are tracked."""
    _check_finite(kind, data)
    rg = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = rg
    out.grad = None
    out._parents = ()
    out._backward = None
    out._tape = None
    if rg and _TAPE_STACK:
        tape = _TAPE_STACK[-1]
        out._parents = tuple(parents)
        out._tape = tape
        tape.nodes.append(out)
        for p in parents:
            if p.requires_grad and p._backward is None:
                tape.watched[p] = None
    return out


def _recording(t):
    return t._tape is not None


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss):
    """Propagate gradients of a scalar loss to every watched leaf tensor.

    Each leaf with ``requires_grad`` that appeared on the tape receives its
    true partial derivative in ``grad``; leaves recorded on the tape but not
    on any path to the loss receive zeros.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor loss")
    if loss.data.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        tape = active_tape()
    if tape is None or not tape.nodes:
        raise TapeError("backward: empty tape (no primitives recorded)")
    if tape.consumed:
        raise TapeError("backward: tape already consumed; re-record the forward pass")
    tape.consumed = True

    grads = {id(loss): np.ones((), dtype=loss.data.dtype)}

    def accumulate(t, g):
        if not t.requires_grad:
            return
        if t._backward is None:  # leaf
            t.grad = g if t.grad is None else t.grad + g
        else:
            key = id(t)
            prev = grads.get(key)
            grads[key] = g if prev is None else prev + g

    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node._backward(g, accumulate)

    for leaf in tape.watched:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    """Elementwise addition with numpy broadcasting."""
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.data.shape} and {b.data.shape}")
    out = _make("add", a.data + b.data, (a, b))
    if _recording(out):
        ash, bsh = a.data.shape, b.data.shape

        def bwd(g, acc):
            acc(a, _unbroadcast(g, ash))
            acc(b, _unbroadcast(g, bsh))

        out._backward = bwd
    return out


def sub(a, b):
    """Elementwise subtraction with numpy broadcasting."""
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.data.shape} and {b.data.shape}")
    out = _make("sub", a.data - b.data, (a, b))
    if _recording(out):
        ash, bsh = a.data.shape, b.data.shape

        def bwd(g, acc):
            acc(a, _unbroadcast(g, ash))
            acc(b, _unbroadcast(-g, bsh))

        out._backward = bwd
    return out


def mul(a, b):
    """Elementwise (Hadamard) product with numpy broadcasting."""
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.data.shape} and {b.data.shape}")
    out = _make("mul", a.data * b.data, (a, b))
    if _recording(out):
        ad, bd = a.data, b.data

        def bwd(g, acc):
            acc(a, _unbroadcast(g * bd, ad.shape))
            acc(b, _unbroadcast(g * ad, bd.shape))

        out._backward = bwd
    return out


def scalar_mul(a, c):
    """Multiply by a python scalar constant."""
    c = float(c)
    out = _make("scalar_mul", a.data * c, (a,))
    if _recording(out):
        out._backward = lambda g, acc: acc(a, g * c)
    return out


def matmul(a, b):
    """Matrix product; stacked (batched) on leading axes like ``np.matmul``."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {ad.shape} @ {bd.shape}")
    out = _make("matmul", np.matmul(ad, bd), (a, b))
    if _recording(out):

        def bwd(g, acc):
            if bd.ndim == 2:
                acc(a, np.matmul(g, bd.T))
            else:
                acc(a, _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape))
            if bd.ndim == 2 and ad.ndim >= 2:
                k, n = bd.shape
                acc(b, np.matmul(ad.reshape(-1, k).T, g.reshape(-1, n)))
            else:
                acc(b, _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape))

        out._backward = bwd
    return out


def sigmoid(a):
    """Logistic function, computed via tanh for overflow safety."""
    out = _make("sigmoid", 0.5 * (np.tanh(0.5 * a.data) + 1.0), (a,))
    if _recording(out):
        s = out.data
        out._backward = lambda g, acc: acc(a, g * s * (1.0 - s))
    return out


def tanh(a):
    out = _make("tanh", np.tanh(a.data), (a,))
    if _recording(out):
        t = out.data
        out._backward = lambda g, acc: acc(a, g * (1.0 - t * t))
    return out


def relu(a):
    out = _make("relu", np.maximum(a.data, 0.0), (a,))
    if _recording(out):
        mask = a.data > 0

        def bwd(g, acc):
            gg = g * mask
            acc(a, gg)

        out._backward = bwd
    return out


def absolute(a):
    """Elementwise absolute value; subgradient 0 at the origin."""
    out = _make("abs", np.abs(a.data), (a,))
    if _recording(out):
        sign = np.sign(a.data)
        out._backward = lambda g, acc: acc(a, g * sign)
    return out


def log(a):
    out = _make("log", np.log(np.where(a.data > 0, a.data, np.nan)), (a,))
    if _recording(out):
        out._backward = lambda g, acc: acc(a, g / a.data)
    return out


def exp(a):
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    out = _make("exp", data, (a,))
    if _recording(out):
        e = out.data
        out._backward = lambda g, acc: acc(a, g * e)
    return out


def softmax(a, axis=-1):
    """Numerically stabilized softmax along one axis (max-shifted).

    Components are kept strictly inside (0, 1): saturated entries that would
    underflow to 0.0 or round to 1.0 are nudged to the nearest representable
    interior value, which perturbs the row sum by well under 1e-6.
    """
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)
    info = np.finfo(s.dtype)
    s = np.clip(s, info.tiny, np.nextafter(s.dtype.type(1.0), s.dtype.type(0.0)))
    out = _make("softmax", s, (a,))
    if _recording(out):

        def bwd(g, acc):
            inner = np.sum(g * s, axis=axis, keepdims=True)
            acc(a, (g - inner) * s)

        out._backward = bwd
    return out


def transpose(a, axes):
    """Permute axes."""
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: invalid permutation {axes} for shape {a.data.shape}")
    out = _make("transpose", np.transpose(a.data, axes).copy(), (a,))
    if _recording(out):
        inverse = tuple(np.argsort(axes))
        out._backward = lambda g, acc: acc(a, np.transpose(g, inverse))
    return out


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"reshape: cannot reshape {a.data.shape} to {shape}")
    out = _make("reshape", a.data.reshape(shape), (a,))
    if _recording(out):
        orig = a.data.shape
        out._backward = lambda g, acc: acc(a, g.reshape(orig))
    return out


def concat(tensors, axis):
    """Concatenate along an existing axis."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    out = _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if _recording(out):
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def bwd(g, acc):
            pieces = np.split(g, splits, axis=axis)
            for t, piece in zip(tensors, pieces):
                acc(t, piece)

        out._backward = bwd
    return out


def slice_axis(a, axis, start, stop):
    """Contiguous slice [start, stop) along one axis."""
    n = a.data.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for axis {axis} of {a.data.shape}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = _make("slice", a.data[index].copy(), (a,))
    if _recording(out):
        shape = a.data.shape

        def bwd(g, acc):
            full = np.zeros(shape, dtype=g.dtype)
            full[index] = g
            acc(a, full)

        out._backward = bwd
    return out


def reduce_sum(a, axis=None, keepdims=False):
    out = _make("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,))
    if _recording(out):
        shape = a.data.shape

        def bwd(g, acc):
            gg = g
            if not keepdims and axis is not None:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                for ax in sorted(ax % len(shape) for ax in axes):
                    gg = np.expand_dims(gg, ax)
            acc(a, np.broadcast_to(gg, shape).copy() if gg.shape != shape else gg)

        out._backward = bwd
    return out


def reduce_mean(a, axis=None, keepdims=False):
    out = _make("mean", np.mean(a.data, axis=axis, keepdims=keepdims), (a,))
    if _recording(out):
        shape = a.data.shape
        count = a.data.size / max(out.data.size, 1)

        def bwd(g, acc):
            gg = g / count
            if not keepdims and axis is not None:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                for ax in sorted(ax % len(shape) for ax in axes):
                    gg = np.expand_dims(gg, ax)
            acc(a, np.broadcast_to(gg, shape).copy() if gg.shape != shape else gg)

        out._backward = bwd
    return out


def conv1d_time(z, w, dilation=1):
    """1-D convolution along the time axis with left-only zero padding.

    ``z`` has shape (B, T, N, d_in) and ``w`` (kernel, d_in, d_out). Output
    time length equals input time length; filter tap ``w[kernel-1]`` reads
    the current step and earlier taps read strictly older steps, so the
    result is causal.
    """
    zd, wd = z.data, w.data
    if zd.ndim != 4 or wd.ndim != 3:
        raise ShapeError(f"conv1d_time: expected (B,T,N,d_in) and (k,d_in,d_out), got {zd.shape} and {wd.shape}")
    if zd.shape[-1] != wd.shape[1]:
        raise ShapeError(f"conv1d_time: channel mismatch, {zd.shape} vs {wd.shape}")
    kernel = wd.shape[0]
    b_, t_, n_, _ = zd.shape
    d_out = wd.shape[2]
    pad = (kernel - 1) * dilation
    zp = np.concatenate([np.zeros((b_, pad, n_, zd.shape[-1]), dtype=zd.dtype), zd], axis=1)
    res = np.zeros((b_, t_, n_, d_out), dtype=zd.dtype)
    for j in range(kernel):
        res += np.matmul(zp[:, j * dilation: j * dilation + t_], wd[j])
    out = _make("conv1d_time", res, (z, w))
    if _recording(out):

        def bwd(g, acc):
            gz = np.zeros_like(zp)
            gw = np.zeros_like(wd)
            for j in range(kernel):
                sl = zp[:, j * dilation: j * dilation + t_]
                gz[:, j * dilation: j * dilation + t_] += np.matmul(g, wd[j].T)
                gw[j] = np.matmul(sl.reshape(-1, sl.shape[-1]).T, g.reshape(-1, d_out))
            acc(z, gz[:, pad:])
            acc(w, gw)

        out._backward = bwd
    return out


def st_mix(probs, candidates, index):
    """Straight-through mix: forward is the selected candidate bit-exactly,
    backward behaves as the probability-weighted sum of all candidates."""
    candidates = list(candidates)
    if probs.data.shape != (len(candidates),):
        raise ShapeError(f"st_mix: {len(candidates)} candidates vs probability shape {probs.data.shape}")
    if not (0 <= index < len(candidates)):
        raise ShapeError(f"st_mix: index {index} out of range")
    base = candidates[0].data.shape
    for c in candidates[1:]:
        if c.data.shape != base:
            raise ShapeError(f"st_mix: candidate shapes differ, {base} vs {c.data.shape}")
    out = _make("st_mix", candidates[index].data, (probs,) + tuple(candidates))
    if _recording(out):
        p = probs.data

        def bwd(g, acc):
            acc(probs, np.array([np.sum(g * c.data) for c in candidates], dtype=p.dtype))
            for j, c in enumerate(candidates):
                acc(c, g * p[j])

        out._backward = bwd
    return out


_REGISTRY = {
    "matmul": lambda ins, at: matmul(ins[0], ins[1]),
    "add": lambda ins, at: add(ins[0], ins[1]),
    "sub": lambda ins, at: sub(ins[0], ins[1]),
    "mul": lambda ins, at: mul(ins[0], ins[1]),
    "scalar_mul": lambda ins, at: scalar_mul(ins[0], at["value"]),
    "sigmoid": lambda ins, at: sigmoid(ins[0]),
    "tanh": lambda ins, at: tanh(ins[0]),
    "relu": lambda ins, at: relu(ins[0]),
    "abs": lambda ins, at: absolute(ins[0]),
    "log": lambda ins, at: log(ins[0]),
    "exp": lambda ins, at: exp(ins[0]),
    "softmax": lambda ins, at: softmax(ins[0], axis=at.get("axis", -1)),
    "transpose": lambda ins, at: transpose(ins[0], at["axes"]),
    "reshape": lambda ins, at: reshape(ins[0], at["shape"]),
    "concat": lambda ins, at: concat(ins, at["axis"]),
    "slice": lambda ins, at: slice_axis(ins[0], at["axis"], at["start"], at["stop"]),
    "sum": lambda ins, at: reduce_sum(ins[0], axis=at.get("axis"), keepdims=at.get("keepdims", False)),
    "mean": lambda ins, at: reduce_mean(ins[0], axis=at.get("axis"), keepdims=at.get("keepdims", False)),
    "conv1d_time": lambda ins, at: conv1d_time(ins[0], ins[1], dilation=at.get("dilation", 1)),
    "st_mix": lambda ins, at: st_mix(ins[0], ins[1:], at["index"]),
}


def apply_primitive(kind, inputs, attrs=None):
    """Dispatch a primitive by name. Unknown names raise AutodiffError."""
    fn = _REGISTRY.get(kind)
    if fn is None:
        raise AutodiffError(f"unknown primitive {kind!r}")
    return fn(list(inputs), attrs or {})


def primitive_names():
    return sorted(_REGISTRY)


def finite_difference_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map the tensor ``x`` to a scalar Tensor and be deterministic.
    The analytic gradient comes from one recorded forward/backward pass; the
    numeric side perturbs each coordinate of ``x`` in turn with pure
    (unrecorded) forward evaluations.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    had_grad = x.grad
    x.grad = None
    with Tape():
        y = f(x)
        if not isinstance(y, Tensor) or y.data.shape != ():
            raise ShapeError("finite_difference_check: f must return a scalar Tensor")
        backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.reshape(-1).copy()
    analytic = analytic.reshape(-1)
    x.grad = had_grad

    flat = x.data.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
