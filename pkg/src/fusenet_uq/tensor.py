"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a row-major numpy buffer. Operations executed while a
:class:`GradTape` is active, and that touch at least one tensor with
``requires_grad=True``, are appended to the tape together with a closure
computing input gradients from the output gradient. ``tape.backward(loss)``
walks the records in reverse and stores ``.grad`` on every leaf.

Training runs in float32; gradient checks use float64 inputs, and every op
preserves the dtype of its inputs.

    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with GradTape() as tape:
    ...     y = (x * x).sum()
    >>> _ = tape.backward(y)
    >>> x.grad.tolist()
    [[2.0, 4.0]]
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from fusenet_uq import kernels
from fusenet_uq.rng import box_muller, stream

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
CE_FLOOR = 1e-12

_ACTIVE_TAPE: contextvars.ContextVar[Optional["GradTape"]] = contextvars.ContextVar(
    "fusenet_uq_tape", default=None
)


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class ContractError(RuntimeError):
    """Raised when an API is used outside its contract (e.g. non-scalar loss)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.ascontiguousarray(data, dtype=dtype)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: int
    backward: Callable


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager; the tape is consumed by :meth:`backward`.
    Tapes are per-context, so independent tapes may run in separate threads.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._nodes: dict[int, tuple[int, Tensor]] = {}
        self._leaves: list[tuple[int, Tensor]] = []
        self._token = None
        self._consumed = False

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    @property
    def records(self) -> list[tuple[str, tuple, int]]:
        return [(r.op, r.inputs, r.output) for r in self._records]

    def _node(self, t: Tensor) -> Optional[int]:
        hit = self._nodes.get(id(t))
        if hit is not None and hit[1] is t:
            return hit[0]
        if not t.requires_grad:
            return None
        nid = len(self._nodes)
        self._nodes[id(t)] = (nid, t)
        self._leaves.append((nid, t))
        t.node_id = nid
        return nid

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, backward: Callable) -> Tensor:
        if self._consumed:
            raise ContractError("tape already consumed by backward(); call reset()")
        ids = tuple(self._node(t) for t in inputs)
        result = Tensor(out)
        if all(i is None for i in ids):
            return result
        nid = len(self._nodes)
        result.requires_grad = True
        result.node_id = nid
        self._nodes[id(result)] = (nid, result)
        self._records.append(_Record(op, ids, nid, backward))
        return result

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Backpropagate from a scalar ``loss``; returns leaf gradients keyed by node id."""
        if self._consumed:
            raise ContractError("tape already consumed by backward(); call reset()")
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {}
        hit = self._nodes.get(id(loss))
        if hit is not None and hit[1] is loss:
            grads[hit[0]] = np.ones_like(loss.data)
        for rec in reversed(self._records):
            g = grads.pop(rec.output, None)
            if g is None:
                continue
            needs = tuple(i is not None for i in rec.inputs)
            for i, gi in zip(rec.inputs, rec.backward(g, needs)):
                if i is None or gi is None:
                    continue
                grads[i] = grads[i] + gi if i in grads else gi
        out = {}
        for nid, leaf in self._leaves:
            g = grads.get(nid)
            g = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
            leaf.grad = g
            out[nid] = g
        self._consumed = True
        self._records.clear()
        return out

    def reset(self):
        for _, t in self._nodes.values():
            t.node_id = None
        self._records.clear()
        self._nodes.clear()
        self._leaves.clear()
        self._consumed = False


def backward(tape: GradTape, loss: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(loss)


def _apply(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward: Callable) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return Tensor(out)
    return tape.record(op, inputs, out, backward)


def _check_shape(shape) -> tuple:
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise ShapeError(f"shape must be non-empty with positive dims, got {shape}")
    return shape


# --- creation ---------------------------------------------------------------

def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape), dtype=dtype), requires_grad=requires_grad)


def randn(shape, seed: int, std: float = 1.0, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    """Gaussian(0, std^2) samples from the Philox + Box-Muller pipeline."""
    shape = _check_shape(shape)
    if not std > 0:
        raise ValueError(f"std must be > 0, got {std}")
    z = box_muller(stream(seed), int(np.prod(shape))) * std
    return Tensor(z.reshape(shape).astype(dtype), requires_grad=requires_grad)


# --- elementwise ------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _apply("add", (a, b), a.data + b.data, bw)


def sub(a, b) -> Tensor:
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _apply("sub", (a, b), a.data - b.data, bw)


def mul(a, b) -> Tensor:
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def bw(g, needs):
        return (
            _unbroadcast(g * bd, ad.shape) if needs[0] else None,
            _unbroadcast(g * ad, bd.shape) if needs[1] else None,
        )

    return _apply("mul", (a, b), ad * bd, bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g, needs):
        return (g * mask,)

    return _apply("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), bw)


# --- reductions and reshaping ------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def bw(g, needs):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype),)

    return _apply("sum", (x,), np.asarray(x.data.sum(axis=axis), dtype=x.dtype), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def bw(g, needs):
        return (g.reshape(src),)

    return _apply("reshape", (x,), out, bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g, needs):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _apply("concat", tuple(tensors), out, bw)


# --- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g, needs):
        return (g @ bd.T if needs[0] else None, ad.T @ g if needs[1] else None)

    return _apply("matmul", (a, b), ad @ bd, bw)


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Same-padded, stride-1 cross-correlation of ``x[B,C,H,W]`` with ``w[F,C,kh,kw]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    b, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weight {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d bias must have shape ({f},), got {bias.shape}")
    cols = kernels.im2col(x.data, kh, kw)
    wm = w.data.reshape(f, -1)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(b, f, h, wd)

    def bw(g, needs):
        gm = g.reshape(b, f, h * wd)
        dx = dw = db = None
        if needs[0]:
            dx = kernels.col2im(np.matmul(wm.T, gm), (b, c, h, wd), kh, kw)
        if needs[1]:
            dw = gm[0] @ cols[0].T
            for i in range(1, b):
                dw += gm[i] @ cols[i].T
            dw = dw.reshape(w.shape)
        if len(needs) > 2 and needs[2]:
            db = gm.sum(axis=(0, 2))
        return dx, dw, db

    inputs = (x, w) if bias is None else (x, w, bias)
    return _apply("conv2d", inputs, out, bw)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    if window != stride:
        raise ShapeError("only non-overlapping pooling (window == stride) is supported")
    if x.ndim != 4 or x.shape[2] % window or x.shape[3] % window:
        raise ShapeError(f"maxpool2d needs H, W divisible by {window}, got {x.shape}")
    out, idx = kernels.maxpool_forward(x.data, window)

    def bw(g, needs):
        return (kernels.maxpool_backward(g, idx, window),)

    return _apply("maxpool2d", (x,), out, bw)


def global_average_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_average_pool expects [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape

    def bw(g, needs):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(x.dtype),)

    return _apply("global_average_pool", (x,), x.data.mean(axis=(2, 3)).astype(x.dtype), bw)


@dataclass
class BatchNormStats:
    """Running per-channel statistics; mutated only by train-mode batchnorm."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, dtype=DEFAULT_DTYPE) -> "BatchNormStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: Optional[BatchNormStats] = None,
    mode: str = "train",
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalisation over batch and spatial axes of ``x[B,C,H,W]``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects [B,C,H,W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm gamma/beta must have shape ({c},)")
    axes = (0, 2, 3)
    n = x.size // c
    bshape = (1, c, 1, 1)
    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if stats is not None:
            m = stats.momentum
            unbiased = var * (n / (n - 1)) if n > 1 else var
            stats.mean[...] = m * stats.mean + (1 - m) * mu
            stats.var[...] = m * stats.var + (1 - m) * unbiased
    else:
        if stats is None:
            raise ContractError("eval-mode batchnorm needs running statistics")
        mu, var = stats.mean, stats.var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = (xhat * gd + beta.data.reshape(bshape)).astype(x.dtype)

    def bw(g, needs):
        dgamma = (g * xhat).sum(axis=axes) if needs[1] else None
        dbeta = g.sum(axis=axes) if needs[2] else None
        dx = None
        if needs[0]:
            dxhat = g * gd
            if mode == "train":
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                dx = (inv_std.reshape(bshape) / n) * (n * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return _apply("batchnorm", (x, gamma, beta), out, bw)


# --- probabilities and losses --------------------------------------------------

def softmax(logits: Tensor) -> Tensor:
    """Max-shifted softmax over the last axis."""
    if logits.shape[-1] < 2:
        raise ShapeError("softmax needs at least two classes")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    y = np.maximum(y, np.finfo(y.dtype).tiny)

    def bw(g, needs):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _apply("softmax", (logits,), y, bw)


def _labels(labels, n: int, k: int) -> np.ndarray:
    lab = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    if lab.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {lab.shape}")
    if lab.min() < 0 or lab.max() >= k:
        raise IndexError(f"label out of range [0, {k})")
    return lab


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of ``-log(max(p[label], 1e-12))`` over the batch."""
    p2 = probs.data.reshape(-1, probs.shape[-1])
    n, k = p2.shape
    lab = _labels(labels, n, k)
    picked = p2[np.arange(n), lab]
    clamped = np.maximum(picked, CE_FLOOR)
    loss = np.asarray(-np.log(clamped).mean(), dtype=probs.dtype)

    def bw(g, needs):
        d = np.zeros_like(p2)
        d[np.arange(n), lab] = np.where(picked > CE_FLOOR, -1.0 / clamped, 0.0) / n
        return ((d * g).reshape(probs.shape),)

    return _apply("cross_entropy", (probs,), loss, bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Fused, numerically stable ``cross_entropy(softmax(logits))`` (batch mean)."""
    z = logits.data
    n, k = z.shape
    lab = _labels(labels, n, k)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = np.asarray((lse - shifted[np.arange(n), lab]).mean(), dtype=logits.dtype)

    def bw(g, needs):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), lab] -= 1.0
        return ((p * (g / n)).astype(logits.dtype),)

    return _apply("softmax_cross_entropy", (logits,), loss, bw)
