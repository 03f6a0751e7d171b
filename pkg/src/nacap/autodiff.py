"""Dense-tensor math with tape-based reverse-mode differentiation.

All arrays are row-major numpy buffers. Default precision is float32; tests
flip to float64 via `use_dtype`. Every forward and backward result is checked
for NaN/Inf. A single global tape records differentiable ops while active;
tensors created outside a tape are plain immutable values.
"""

from __future__ import annotations

import hashlib
import struct
from contextlib import contextmanager

import numpy as np

from .errors import (
    EmptyTape,
    InvalidProbability,
    NonFiniteValue,
    NotScalar,
    ShapeMismatch,
)

_DEFAULT_DTYPE = np.float32
_ACTIVE_TAPE = None


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


@contextmanager
def use_dtype(dtype):
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def seeded_rng(seed, *stream):
    """Counter-based (Philox) generator keyed by seed plus stream tags.

    Distinct tag tuples give independent streams; results do not depend on
    draw order elsewhere in the program.
    """
    material = repr((int(seed),) + tuple(stream)).encode("utf-8")
    digest = hashlib.sha256(material).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


def _check_finite(arr):
    if not np.isfinite(arr).all():
        raise NonFiniteValue("non-finite value produced")
    return arr


class Tensor:
    """A dense array plus optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        _check_finite(self.data)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of executed differentiable ops.

    Backward visits the record in exact reverse execution order. Clearing
    the tape drops every saved intermediate.
    """

    def __init__(self):
        self._nodes = []
        self._outputs = []

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False

    def record(self, backward_fn, output=None):
        self._nodes.append(backward_fn)
        if output is not None:
            self._outputs.append(output)

    def clear(self):
        self._nodes.clear()
        self._outputs.clear()

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss):
        if loss.data.size != 1:
            raise NotScalar(f"loss has shape {loss.data.shape}")
        if not self._nodes:
            raise EmptyTape("no recorded operations")
        # intermediate grads are recomputed on every call; only leaves
        # (tensors that are never op outputs) accumulate across calls
        for out in self._outputs:
            out.grad = None
        loss._accumulate(np.ones_like(loss.data))
        for fn in reversed(self._nodes):
            fn()


def active_tape():
    return _ACTIVE_TAPE


def backward(loss):
    if _ACTIVE_TAPE is None:
        raise EmptyTape("no active tape")
    _ACTIVE_TAPE.backward(loss)


def _wants_grad(*tensors):
    return _ACTIVE_TAPE is not None and any(t.requires_grad for t in tensors)


def _make_out(data, track):
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(data)
    out.requires_grad = track
    out.grad = None
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def constant(data, dtype=None):
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None):
    return Tensor(data, requires_grad=True, dtype=dtype)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return constant(x)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch("matmul needs rank >= 2 operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims {a.data.shape} x {b.data.shape}")
    out = _make_out(np.matmul(a.data, b.data), _wants_grad(a, b))
    if out.requires_grad:
        def bwd():
            g = out.grad
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accumulate(_check_finite(_unbroadcast(ga, a.data.shape)))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accumulate(_check_finite(_unbroadcast(gb, b.data.shape)))
        _ACTIVE_TAPE.record(bwd, out)
    return out


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    out = _make_out(data, _wants_grad(a, b))
    if out.requires_grad:
        def bwd():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad, b.data.shape))
        _ACTIVE_TAPE.record(bwd, out)
    return out


def mul(a, b):
    """Hadamard product with broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    out = _make_out(data, _wants_grad(a, b))
    if out.requires_grad:
        def bwd():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape))
        _ACTIVE_TAPE.record(bwd, out)
    return out


def scale(a, s):
    a = _as_tensor(a)
    out = _make_out(a.data * s, _wants_grad(a))
    if out.requires_grad:
        def bwd():
            a._accumulate(out.grad * s)
        _ACTIVE_TAPE.record(bwd, out)
    return out


def relu(a):
    a = _as_tensor(a)
    out = _make_out(np.maximum(a.data, 0), _wants_grad(a))
    if out.requires_grad:
        mask = a.data > 0
        def bwd():
            a._accumulate(out.grad * mask)
        _ACTIVE_TAPE.record(bwd, out)
    return out


def tanh(a):
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out = _make_out(y, _wants_grad(a))
    if out.requires_grad:
        def bwd():
            a._accumulate(out.grad * (1.0 - y * y))
        _ACTIVE_TAPE.record(bwd, out)
    return out


def sigmoid(a):
    a = _as_tensor(a)
    y = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    y = y.astype(a.data.dtype)
    out = _make_out(y, _wants_grad(a))
    if out.requires_grad:
        def bwd():
            a._accumulate(out.grad * y * (1.0 - y))
        _ACTIVE_TAPE.record(bwd, out)
    return out


def log(a):
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)  # non-finite results are rejected by _make_out
    out = _make_out(y, _wants_grad(a))
    if out.requires_grad:
        def bwd():
            a._accumulate(out.grad / a.data)
        _ACTIVE_TAPE.record(bwd, out)
    return out


def softmax(a, axis=-1):
    """Numerically stabilized softmax along `axis`."""
    a = _as_tensor(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeMismatch(f"axis {axis} invalid for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make_out(y, _wants_grad(a))
    if out.requires_grad:
        def bwd():
            g = out.grad
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate(_check_finite(y * (g - dot)))
        _ACTIVE_TAPE.record(bwd, out)
    return out


_LN_EPS = 1e-5


def layer_norm(a, gain, bias):
    """Per-row (last axis) normalization followed by affine transform."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    d = a.data.shape[-1]
    if d < 2:
        raise ShapeMismatch("layer_norm needs last-axis length >= 2")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeMismatch("gain/bias must match last axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = centered * inv
    out = _make_out(gain.data * xhat + bias.data, _wants_grad(a, gain, bias))
    if out.requires_grad:
        def bwd():
            g = out.grad
            if gain.requires_grad:
                gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
            if bias.requires_grad:
                bias._accumulate(g.reshape(-1, d).sum(axis=0))
            if a.requires_grad:
                dxhat = g * gain.data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                a._accumulate(_check_finite(inv * (dxhat - m1 - xhat * m2)))
        _ACTIVE_TAPE.record(bwd, out)
    return out


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    out = _make_out(data, _wants_grad(*tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def bwd():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * out.grad.ndim
                    idx[axis] = slice(lo, hi)
                    t._accumulate(out.grad[tuple(idx)])
        _ACTIVE_TAPE.record(bwd, out)
    return out


def mean_pool(a, axis):
    a = _as_tensor(a)
    n = a.data.shape[axis]
    out = _make_out(a.data.mean(axis=axis), _wants_grad(a))
    if out.requires_grad:
        def bwd():
            a._accumulate(np.expand_dims(out.grad, axis).repeat(n, axis) / n)
        _ACTIVE_TAPE.record(bwd, out)
    return out


def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = _make_out(a.data.sum(axis=axis, keepdims=keepdims), _wants_grad(a))
    if out.requires_grad:
        def bwd():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        _ACTIVE_TAPE.record(bwd, out)
    return out


def reshape(a, shape):
    a = _as_tensor(a)
    out = _make_out(a.data.reshape(shape), _wants_grad(a))
    if out.requires_grad:
        def bwd():
            a._accumulate(out.grad.reshape(a.data.shape))
        _ACTIVE_TAPE.record(bwd, out)
    return out


def transpose(a, axes):
    a = _as_tensor(a)
    out = _make_out(np.ascontiguousarray(a.data.transpose(axes)), _wants_grad(a))
    if out.requires_grad:
        inverse = np.argsort(axes)
        def bwd():
            a._accumulate(out.grad.transpose(inverse))
        _ACTIVE_TAPE.record(bwd, out)
    return out


def embedding_lookup(table, ids):
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeMismatch("embedding index out of range")
    out = _make_out(table.data[ids], _wants_grad(table))
    if out.requires_grad:
        def bwd():
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids.reshape(-1),
                      out.grad.reshape(-1, table.data.shape[-1]))
        _ACTIVE_TAPE.record(bwd, out)
    return out


def take_along_last(a, indices):
    """Pick one entry along the last axis per leading position."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != a.data.shape[:-1]:
        raise ShapeMismatch(f"index shape {idx.shape} vs {a.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[-1]):
        raise ShapeMismatch("take index out of range")
    picked = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    out = _make_out(picked, _wants_grad(a))
    if out.requires_grad:
        def bwd():
            g = np.zeros_like(a.data)
            np.put_along_axis(g, idx[..., None], out.grad[..., None], axis=-1)
            a._accumulate(g)
        _ACTIVE_TAPE.record(bwd, out)
    return out


def dropout(a, p, train, rng=None):
    """Inverted dropout; exact identity when train is off."""
    if not 0.0 <= p < 1.0:
        raise InvalidProbability(f"dropout p={p}")
    a = _as_tensor(a)
    if not train or p == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype)
    return mul(a, constant(keep / (1.0 - p)))


# ---------------------------------------------------------------------------
# Parameter checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"NACF"
CHECKPOINT_VERSION = 1


def save_params(path, params):
    """Write named arrays as the flat binary checkpoint container.

    Values are stored as little-endian float32; round-trips are bit exact.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, value in params.items():
            arr = np.ascontiguousarray(
                value.data if isinstance(value, Tensor) else value, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_params(path):
    """Read a checkpoint container back into an ordered name -> array dict."""
    out = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ShapeMismatch(f"bad checkpoint magic {magic!r} in {path}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ShapeMismatch(f"unsupported checkpoint version {version}")
        while True:
            header = fh.read(4)
            if not header:
                break
            (name_len,) = struct.unpack("<I", header)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(dims)
            out[name] = data.copy()
    return out
