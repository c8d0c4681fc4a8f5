"""Dense tensors with a reverse-mode gradient tape.

Operations executed while a :class:`Tape` is active are recorded whenever one
of their inputs requires a gradient. Outside a tape every op is a plain
forward evaluation, which is how frozen models are run.

Broadcasting is deliberately narrow: two operands must share a shape, or the
second one is a vector matching the last axis of the first (bias/gain).
"""
from __future__ import annotations

import builtins
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ContractError", "NonFiniteError",
    "tensor", "zeros", "ones", "precision", "default_dtype", "active_tape",
    "add", "sub", "mul", "scale", "matmul", "transpose", "reshape", "concat",
    "split", "sum", "mean", "relu", "sigmoid", "tanh", "softmax",
    "log_softmax", "layer_norm", "cross_entropy", "embedding_lookup", "dropout",
]


class ContractError(RuntimeError):
    """Misuse of the tape (non-scalar root, double backward, ...)."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from finite inputs."""


_local = threading.local()


def default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (e.g. ``np.float64``)."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise ContractError("tensor was not produced on an active tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tape:
    """Ordered record of executed ops.

    ``backward`` walks the record in exact reverse execution order and may be
    called once; ``reset`` clears the record so the tape can be reused.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable, str]] = []
        self._consumed = False
        self.visited: list[str] = []

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise ContractError("tape already consumed by backward; call reset()")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    @property
    def op_names(self) -> list[str]:
        """Recorded op names in execution order."""
        return [name for _, _, _, name in self._records]

    def reset(self) -> None:
        for out, _, _, _ in self._records:
            out._tape = None
        self._records.clear()
        self._consumed = False
        self.visited = []

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable, name: str) -> None:
        if self._consumed:
            raise ContractError("cannot record on a consumed tape")
        out._tape = self
        self._records.append((out, parents, backward_fn, name))

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise ContractError("backward called twice on the same tape without reset()")
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {loss.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        visited = []
        for out, parents, fn, name in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            visited.append(name)
            pgrads = fn(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if p._tape is None:
                    leaves[key] = p
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
        self.visited = visited
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.data.dtype, copy=False)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


CHECK_FINITE = True


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        tape.record(out, tuple(parents), backward_fn, name)
    return out


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> bool:
    """True when ``b`` is a trailing-axis vector broadcast over ``a``."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_bias(g: np.ndarray, d: int) -> np.ndarray:
    return g.reshape(-1, d).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bias = _broadcast_kind(a, b, "add")

    def backward(g):
        return g, (_reduce_bias(g, b.shape[0]) if bias else g)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bias = _broadcast_kind(a, b, "sub")

    def backward(g):
        return g, -(_reduce_bias(g, b.shape[0]) if bias else g)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bias = _broadcast_kind(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        gb = g * ad
        return g * bd, (_reduce_bias(gb, bd.shape[0]) if bias else gb)

    return _result(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    """``(..., m, k) @ (k, n)`` or batched ``(..., m, k) @ (..., k, n)``."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {ad.shape} @ {bd.shape}")
    if bd.ndim > 2 and bd.shape[:-2] != ad.shape[:-2]:
        raise ValueError(f"matmul: batch dimensions differ, {ad.shape} @ {bd.shape}")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    axis = axis % a.ndim
    if builtins.sum(sizes) != a.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover axis of length {a.shape[axis]}")
    out, start = [], 0
    for size in sizes:
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, start + size)
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros_like(a.data)
            full[index] = g
            return (full,)

        out.append(_result(np.ascontiguousarray(a.data[index]), (a,), backward, "split"))
        start += size
    return out


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _masked_logits(x: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return x
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("softmax: a row is fully masked, distribution undefined")
    return np.where(mask, x, -np.inf)


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Stable softmax; ``mask`` (True = keep) sends excluded logits to -inf."""
    if mask is not None and axis not in (-1, x.ndim - 1):
        raise ValueError("masked softmax only supports the last axis")
    y = _softmax_np(_masked_logits(x.data, mask), axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    d = xd.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _reduce_bias(g * xhat, d), _reduce_bias(g, d)

    return _result(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


def cross_entropy(logits: Tensor, targets, pad_id: int | None = None) -> Tensor:
    """Mean negative log-likelihood over non-pad positions.

    ``logits`` has shape ``(..., V)`` and ``targets`` the leading shape.
    """
    ld = logits.data
    v = ld.shape[-1]
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != ld.shape[:-1]:
        raise ValueError(f"targets shape {t.shape} does not match logits {ld.shape[:-1]}")
    keep = np.ones(t.shape, dtype=bool) if pad_id is None else t != pad_id
    if ((t[keep] < 0) | (t[keep] >= v)).any():
        raise IndexError(f"target id out of range [0, {v})")
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy: every target is padding, nothing to supervise")
    flat = ld.reshape(-1, v)
    tf = np.where(keep, t, 0).reshape(-1)
    kf = keep.reshape(-1)
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(tf.size), tf]
    loss = np.asarray((nll * kf).sum() / n, dtype=ld.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(tf.size), tf] -= 1.0
        p *= kf[:, None] * (float(g) / n)
        return (p.reshape(ld.shape).astype(ld.dtype, copy=False),)

    return _result(loss, (logits,), backward, "cross_entropy")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"token id out of range [0, {v})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[ids], (table,), backward, "embedding_lookup")


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not train or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    rng = rng or np.random.default_rng()
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
