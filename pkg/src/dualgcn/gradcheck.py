"""Central-difference gradient verification."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def _as_call(f, x):
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)
    return xs, ((lambda: f(xs[0])) if single else f)


def analytic_gradients(f, x: Tensor | Sequence[Tensor]) -> list[np.ndarray]:
    """Tape gradients of the scalar ``f`` with respect to each tensor of ``x``."""
    xs, call = _as_call(f, x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = call()
    tape.backward(out)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]


def numeric_gradients(f, x: Tensor | Sequence[Tensor], h: float = 1e-5, points: int = 3) -> list[np.ndarray]:
    """Finite-difference gradients, one coordinate at a time.

    ``points=3`` is the central difference ``(f(x+h) - f(x-h)) / 2h``;
    ``points=5`` is the fourth-order stencil
    ``(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h``. Values keep the dtype
    of the tensors, so an extended-precision model gives an extended-precision
    estimate.
    """
    if points not in (3, 5):
        raise ValueError(f"points must be 3 or 5, got {points}")
    xs, call = _as_call(f, x)
    out = []
    for t in xs:
        flat = t.data.reshape(-1)
        hh = flat.dtype.type(h)
        g = np.zeros(flat.size, dtype=flat.dtype)
        for i in range(flat.size):
            orig = flat[i]
            v = {}
            for k in ((-1, 1) if points == 3 else (-2, -1, 1, 2)):
                flat[i] = orig + k * hh
                v[k] = np.asarray(call().data).reshape(())[()]
            flat[i] = orig
            if points == 3:
                g[i] = (v[1] - v[-1]) / (2 * hh)
            else:
                g[i] = (-v[2] + 8 * v[1] - 8 * v[-1] + v[-2]) / (12 * hh)
        out.append(g.reshape(t.shape))
    return out


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    """Largest ``|a - n| / max(|a|, |n|, 1e-8)`` over all coordinates."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        if a.size:
            err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
            worst = max(worst, float(err.max()))
    return worst


def grad_check(f: Callable[[], Tensor] | Callable[[Tensor], Tensor],
               x: Tensor | Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` maps ``x`` to a scalar tensor. When ``x`` is a sequence of tensors
    ``f`` is called without arguments and every listed tensor is checked; this
    is how whole modules are verified against their parameters.
    """
    return max_relative_error(analytic_gradients(f, x), numeric_gradients(f, x, h))
