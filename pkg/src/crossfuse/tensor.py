"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded on it when at
least one input requires a gradient. ``tape.backward(loss)`` replays the
records in reverse and accumulates ``.grad`` on every participating tensor.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> tape.backward(loss)
    >>> w.grad.tolist()
    [[2.0, 4.0]]
"""
from __future__ import annotations

import threading

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Incompatible tensor shapes."""


class TapeError(RuntimeError):
    """Misuse of a tape (second backward, foreign loss, non-scalar loss)."""


_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.records = []
        self.used = False
        self._prev = None

    def __enter__(self):
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def record(self, out, inputs, backward):
        self.records.append((out, inputs, backward))

    def backward(self, loss: "Tensor"):
        if self.used:
            raise TapeError("tape already consumed by a previous backward pass")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if not self.records or not any(r[0] is loss for r in reversed(self.records)):
            raise TapeError("loss was not produced on this tape")
        self.used = True
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            out.grad = g if out.grad is None else out.grad + g
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # what remains are leaves
        leaves = {}
        for out, inputs, _ in self.records:
            for inp in inputs:
                if id(inp) in grads:
                    leaves[id(inp)] = inp
        for key, t in leaves.items():
            g = grads[key]
            t.grad = g if t.grad is None else t.grad + g
        self.records = []


def backward(tape: Tape, loss: "Tensor"):
    tape.backward(loss)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward):
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, _copy=False)
    if needs:
        tape.record(out, inputs, backward)
    return out


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _copy=True):
        arr = np.array(data, dtype=np.float64) if _copy else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False, _copy=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


# elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def power(a, p: float):
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


# reductions and shape ------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64), (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[x] for x in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i, j):
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a, idx):
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)
    return _make(a.data[idx], (a,), bw)


def take_rows(table, ids):
    """Embedding lookup: ``table[ids]`` with a scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)
    return _make(table.data[ids], (table,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


# linear algebra ------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
    return _make(ad @ bd, (a, b), bw)


def _check_axis(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.ndim}")


def softmax(x, axis=-1):
    _check_axis(x, axis)
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def bw(g):
        r = g - (g * out).sum(axis=axis, keepdims=True)
        r *= out
        return (r,)
    return _make(out, (x,), bw)


def log_softmax(x, axis=-1):
    _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def attend(a, b, v, scale=1.0):
    """Fused ``softmax(scale * a @ b^T, axis=-1) @ v`` over ``[B, S, d]`` inputs.

    Returns (output tensor, attention probabilities as a constant tensor).
    """
    a, b, v = as_tensor(a), as_tensor(b), as_tensor(v)
    if a.ndim != 3 or b.ndim != 3 or v.ndim != 3:
        raise DimensionError("attend expects [B, S, d] inputs")
    if a.shape[-1] != b.shape[-1] or b.shape[1] != v.shape[1] or not (a.shape[0] == b.shape[0] == v.shape[0]):
        raise DimensionError(f"attend shape mismatch: {a.shape}, {b.shape}, {v.shape}")
    ad, bd, vd = (np.ascontiguousarray(t.data) for t in (a, b, v))
    out, probs = kernels.attend_forward(ad, bd, vd, float(scale))

    def bw(g):
        return kernels.attend_backward(ad, bd, vd, probs, np.ascontiguousarray(g), float(scale))
    return _make(out, (a, b, v), bw), Tensor(probs, _copy=False)


# spatial -------------------------------------------------------------------

def conv3(volume, kernels_, stride=1):
    """Valid 3D cross-correlation.

    ``volume`` is ``[C, D, H, W]`` or batched ``[B, C, D, H, W]``; ``kernels_``
    is ``[C', C, k, k, k]``.
    """
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    batched = volume.ndim == 5
    x = volume.data if batched else volume.data[None]
    w = kernels_.data
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv3 shape mismatch: {volume.shape} with kernels {kernels_.shape}")
    k = w.shape[2]
    if any(k > n for n in x.shape[2:]):
        raise DimensionError(f"kernel extent {k} exceeds input extents {x.shape[2:]}")
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    out = kernels.conv3d_forward(x, w, stride)

    def bw(g):
        g = np.ascontiguousarray(g if batched else g[None])
        gx, gw = kernels.conv3d_backward(x, w, g, stride, volume.requires_grad)
        if gx is not None and not batched:
            gx = gx[0]
        return gx, gw
    return _make(out if batched else out[0], (volume, kernels_), bw)


def upsample_nearest(x, factor: int):
    """Replicate each cell of the last two axes ``factor x factor`` times."""
    if factor < 1:
        raise DimensionError("upsample factor must be >= 1")
    if factor == 1:
        return reshape(x, x.shape)
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)
    h, w = x.shape[-2:]

    def bw(g):
        g = g.reshape(g.shape[:-2] + (h, factor, w, factor))
        return (g.sum(axis=(-3, -1)),)
    return _make(out, (x,), bw)


def avg_pool2(x, factor: int):
    """Non-overlapping average pool over the last two axes (no gradient needed)."""
    h, w = x.shape[-2:]
    d = x.data.reshape(x.shape[:-2] + (h // factor, factor, w // factor, factor))
    return Tensor(d.mean(axis=(-3, -1)))


# numerics helpers ----------------------------------------------------------

def finite_diff_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at array/tensor ``x``."""
    if h <= 0:
        raise ValueError("step size must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(Tensor(base)))
        flat[i] = orig - h
        fm = _scalar(f(Tensor(base)))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def _scalar(v):
    if isinstance(v, Tensor):
        v = v.data
    return float(np.asarray(v).reshape(-1)[0])


def max_rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0


# serialization -------------------------------------------------------------

def dumps(t) -> bytes:
    # asarray keeps 0-d shapes (ascontiguousarray would promote them to 1-d)
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
    header = "shape: " + ",".join(str(d) for d in arr.shape) + "\n"
    return header.encode("ascii") + arr.tobytes(order="C")


def loads(buf: bytes) -> Tensor:
    nl = buf.index(b"\n")
    header = buf[:nl].decode("ascii")
    if not header.startswith("shape:"):
        raise ValueError("missing shape header")
    dims = header[len("shape:"):].strip()
    shape = tuple(int(d) for d in dims.split(",")) if dims else ()
    arr = np.frombuffer(buf[nl + 1:], dtype="<f8")
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"payload holds {arr.size} values, header says {shape}")
    return Tensor(arr.reshape(shape).astype(np.float64))


def save(t, path):
    with open(path, "wb") as fh:
        fh.write(dumps(t))


def load(path) -> Tensor:
    with open(path, "rb") as fh:
        return loads(fh.read())
