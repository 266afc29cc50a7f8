"""Dense tensors with define-by-run reverse-mode differentiation.

Every op builds a fresh output tensor that remembers its inputs and a
backward rule. Calling :func:`backward` on a scalar linearises the graph
into a :class:`Tape` (topological order) and replays it in reverse.

Only 2-D arithmetic is supported, plus row-vector bias broadcasting in
:func:`add`. Any other shape mismatch raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True
_THREADS: int | None = None


class ShapeError(ValueError):
    pass


class EmptyLossSupportError(ValueError):
    pass


def get_dtype():
    return _DTYPE


def set_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors (64-bit for gradient checks)."""
    previous = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def set_threads(n: int | None) -> None:
    """Cap BLAS threads. Results are deterministic for a fixed count."""
    global _THREADS
    _THREADS = n
    if n is not None:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=int(n))


def threads_from_env() -> int | None:
    value = os.environ.get("MEDTUNE_THREADS")
    return int(value) if value else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice2d(self, index)

    @property
    def T(self):
        return transpose(self)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_2d(name: str, *ts: Tensor) -> None:
    for t in ts:
        if t.data.ndim != 2:
            raise ShapeError(f"{name} expects 2-D tensors, got shape {t.shape}")


# --- ops -----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    _check_2d("transpose", a)
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. ``b`` may be a row vector of shape (n,) or (1, n)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if a.data.ndim == 2 and b.data.ndim in (1, 2) and b.data.size == a.shape[1] and (
        b.data.ndim == 1 or b.shape[0] == 1
    ):
        bshape = b.shape
        return _result(
            a.data + b.data.reshape(1, -1),
            (a, b),
            lambda g: (g, g.sum(axis=0).reshape(bshape)),
            "add_row",
        )
    raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def backward(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return _result(out.astype(x.dtype, copy=False), (a,), backward, "silu")


def softmax_rows(a: Tensor, causal: bool = False) -> Tensor:
    """Row-wise softmax. With ``causal`` the square input is masked above the diagonal."""
    _check_2d("softmax_rows", a)
    x = a.data
    if causal:
        if x.shape[0] != x.shape[1]:
            raise ShapeError(f"causal softmax needs a square input, got {x.shape}")
        x = np.where(np.tri(x.shape[0], dtype=bool), x, -np.inf)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, (a,), backward, "softmax")


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` per row.

    A constant row ``c`` maps to ``gain * c / sqrt(c**2 + eps)``, i.e. ``gain * sign(c)``
    up to the eps correction.
    """
    _check_2d("rms_norm", x)
    if gain.shape != (x.shape[1],):
        raise ShapeError(f"rms_norm gain shape {gain.shape} does not match width {x.shape[1]}")
    xd, gd = x.data, gain.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=1, keepdims=True) + eps)
    xhat = xd * inv
    n = xd.shape[1]

    def backward(g):
        gx_hat = g * gd
        dx = inv * (gx_hat - xhat * (gx_hat * xhat).sum(axis=1, keepdims=True) / n)
        return dx, (g * xhat).sum(axis=0)

    return _result((xhat * gd).astype(xd.dtype, copy=False), (x, gain), backward, "rms_norm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise IndexError(f"token id out of range [0, {rows})")
    return _result(table.data[ids], (table,), backward, "embedding")


def slice2d(a: Tensor, index) -> Tensor:
    _check_2d("slice2d", a)
    if not isinstance(index, tuple):
        index = (index, slice(None))
    if not all(isinstance(i, slice) for i in index):
        raise TypeError("slice2d only supports slice objects")
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[index] = g
        return (out,)

    return _result(a.data[index].copy(), (a,), backward, "slice")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ValueError("concat of nothing")
    for p in parts:
        _check_2d("concat", p)
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        if axis == 0:
            return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shape mismatch: {[p.shape for p in parts]}") from exc
    return _result(data, tuple(parts), backward, "concat")


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary embedding on one head (T, d), half-split pairing (i, i + d/2)."""
    _check_2d("rotary", x)
    half = x.shape[1] // 2

    def rotate(v):
        return np.concatenate([-v[:, half:], v[:, :half]], axis=1)

    def unrotate(v):
        # adjoint of rotate
        return np.concatenate([v[:, half:], -v[:, :half]], axis=1)

    out = x.data * cos + rotate(x.data) * sin
    return _result(out, (x,), lambda g: (g * cos + unrotate(g * sin),), "rotary")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(
        np.asarray(a.data.sum(), dtype=a.data.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
        "sum",
    )


def cross_entropy_masked(logits: Tensor, targets, mask) -> Tensor:
    """Mean next-token NLL over rows where ``mask == 1``.

    Rows with ``mask == 0`` are never read: their targets do not affect the value
    and their gradient rows are exactly zero.
    """
    _check_2d("cross_entropy_masked", logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask)
    n_rows, vocab = logits.shape
    if targets.shape != (n_rows,) or mask.shape != (n_rows,):
        raise ShapeError(
            f"targets {targets.shape} / mask {mask.shape} must match logits rows {n_rows}"
        )
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise EmptyLossSupportError("empty loss support: mask has no nonzero entries")
    sel_targets = targets[rows]
    if sel_targets.min() < 0 or sel_targets.max() >= vocab:
        raise IndexError(f"target id out of range [0, {vocab})")
    x = logits.data[rows]
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    logp_target = (x[np.arange(rows.size), sel_targets] - m[:, 0]) - np.log(z[:, 0])
    count = rows.size
    value = -logp_target.sum() / count

    def backward(g):
        p = e / z
        p[np.arange(count), sel_targets] -= 1.0
        out = np.zeros_like(logits.data)
        out[rows] = p * (g / count)
        return (out,)

    return _result(np.asarray(value, dtype=logits.data.dtype), (logits,), backward, "xent")


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    """Plain numpy helper for inference-time scoring."""
    m = x.max(axis=1, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


# --- tape ------------------------------------------------------------------


@dataclass
class Tape:
    """Recorded ops in topological order (inputs before outputs)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def build(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are kept
    private to each call so replaying the same graph twice doubles leaf grads.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    tape = Tape.build(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return tape
