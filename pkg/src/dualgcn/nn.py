"""Parameter containers, initialisation and the Adam optimiser."""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor, default_dtype


def uniform_param(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(default_dtype()), requires_grad=True)


def const_param(value, shape) -> Tensor:
    return Tensor(np.full(shape, value, dtype=default_dtype()), requires_grad=True)


class Module:
    """Walks attributes in definition order to collect named parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def state_dict(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.named_parameters())

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            arr = arrays[name]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = uniform_param(rng, (d_in, d_out), d_in)
        self.bias = uniform_param(rng, (d_out,), d_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else T.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = const_param(1.0, (d,))
        self.bias = const_param(0.0, (d,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Adam:
    """Adam with linear warmup; moments are keyed by parameter name."""

    def __init__(self, params: "OrderedDict[str, Tensor]", lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, warmup_steps: int = 0, clip_norm: float | None = 1.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.warmup_steps = warmup_steps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def current_lr(self) -> float:
        if self.warmup_steps > 0 and self.step_count < self.warmup_steps:
            return self.lr * (self.step_count + 1) / self.warmup_steps
        return self.lr

    def step(self) -> None:
        lr = self.current_lr()
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        if self.clip_norm is not None and grads:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if norm > self.clip_norm:
                factor = self.clip_norm / (norm + 1e-12)
                grads = {k: g * factor for k, g in grads.items()}
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        for k, g in grads.items():
            p = self.params[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"__adam_m__.{k}"] = self.m[k]
            out[f"__adam_v__.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.params:
            self.m[k] = np.array(arrays[f"__adam_m__.{k}"], dtype=self.m[k].dtype)
            self.v[k] = np.array(arrays[f"__adam_v__.{k}"], dtype=self.v[k].dtype)
        self.step_count = step_count
