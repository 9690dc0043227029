"""Reverse-mode automatic differentiation over dense numpy arrays.

Small on purpose: just enough primitives for GRUs, graph attention,
MLPs, softmax cross-entropy losses, and Adam. Gradients are accumulated
into ``Tensor.grad`` by :func:`backward`. The default dtype is float64;
``set_default_dtype(np.float32)`` trades reproducibility for speed.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


class ShapeMismatchError(ValueError):
    pass


class NonScalarLossError(ValueError):
    pass


# Set to False to skip tape construction entirely (rollout phase).
_grad_enabled = True


class no_grad:
    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A value node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad and _grad_enabled
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor],
          bwd: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = bwd
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(
            f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return _make(a.data.T, (a,), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [(_as_tensor(t)) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tensors, bwd)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; gradient scatters back."""
    idx = np.asarray(indices, dtype=np.int64)

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

    return _make(a.data[idx], (a,), bwd)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    """Columns [lo, hi) of a 2-D tensor."""

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, lo:hi] = g
            a._accumulate(full)

    return _make(a.data[:, lo:hi], (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(a.data * mask, (a,), bwd)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * scale)

    return _make(a.data * scale, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - y * y))

    return _make(y, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-np.clip(a.data, -60.0, 60.0)))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * y * (1.0 - y))

    return _make(y, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * y)

    return _make(y, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), bwd)


def row_softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            a._accumulate(y * (g - dot))

    return _make(y, (a,), bwd)


def row_max_pool(a: Tensor, axis: int = 0) -> Tensor:
    """Max over one axis; ties route gradient to the first maximal index."""
    y = a.data.max(axis=axis)
    argmax = a.data.argmax(axis=axis)

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            grid = np.indices(y.shape)
            idx = list(grid)
            idx.insert(axis, argmax)
            full[tuple(idx)] = g
            a._accumulate(full)

    return _make(y, (a,), bwd)


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value`` (no grad there)."""
    m = np.asarray(mask, dtype=bool)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.where(m, 0.0, g))

    return _make(np.where(m, value, a.data), (a,), bwd)


def tsum(a: Tensor, axis=None) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape).copy())
            else:
                a._accumulate(np.broadcast_to(
                    np.expand_dims(g, axis), a.shape).copy())

    return _make(a.data.sum(axis=axis), (a,), bwd)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]

    def bwd(g):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.broadcast_to(g / n, a.shape).copy())
            else:
                a._accumulate(np.broadcast_to(
                    np.expand_dims(g, axis), a.shape) / n)

    return _make(a.data.mean(axis=axis), (a,), bwd)


def backward(loss: Tensor) -> None:
    """Populate grads of every tensor reachable from ``loss``."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


class Parameter(Tensor):
    """Named trainable tensor with Adam moment buffers."""

    __slots__ = ("name", "trainable", "m", "v")

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Rescale all grads in place when their global L2 norm exceeds ``max_norm``."""
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params)))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * scale
    return total


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p in self.params:
            if not p.trainable or p.grad is None:
                continue
            g = p.grad
            p.m = self.beta1 * p.m + (1.0 - self.beta1) * g
            p.v = self.beta2 * p.v + (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (p.m / b1t) / (np.sqrt(p.v / b2t) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


_CKPT_MAGIC = b"SGCK"
_CKPT_VERSION = 1


def save_checkpoint(path, params: Sequence[Parameter], step: int = 0) -> None:
    """Versioned binary checkpoint: header then (name, shape, data, m, v) records."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<iqi", _CKPT_VERSION, step, len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            f.write(struct.pack("<H", len(name)))
            f.write(name)
            f.write(struct.pack("<B", len(p.shape)))
            for d in p.shape:
                f.write(struct.pack("<i", d))
            for arr in (p.data, p.m, p.v):
                f.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())


def load_checkpoint(path, params: Sequence[Parameter]) -> int:
    """Restore ``params`` in place from ``path``; returns the stored step."""
    by_name = {p.name: p for p in params}
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, step, count = struct.unpack("<iqi", f.read(16))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<i", f.read(4))[0] for _ in range(ndim))
            size = int(np.prod(shape)) if shape else 1
            bufs = [np.frombuffer(f.read(8 * size), dtype=np.float64).reshape(shape)
                    for _ in range(3)]
            p = by_name.get(name)
            if p is None:
                raise KeyError(f"{path}: unknown parameter {name!r}")
            if p.shape != shape:
                raise ShapeMismatchError(
                    f"{name}: checkpoint shape {shape} vs parameter {p.shape}")
            p.data = bufs[0].astype(p.data.dtype)
            p.m = bufs[1].astype(p.data.dtype)
            p.v = bufs[2].astype(p.data.dtype)
    return step
