"""Single-layer gated recurrent decoder attending over the encoded regions.

Used as the recurrent baseline in ablations; it consumes the same encoder
memory as the transformer decoder and exposes the same call signature.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Linear, Module, uniform_param
from .tensor import Tensor
from .transformer import MultiHeadAttention


class GRUDecoder(Module):
    def __init__(self, rng, vocab_size: int, d_model: int, d_embed: int | None = None, pad_id: int = 0):
        d_embed = d_embed or d_model
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.pad_id = pad_id
        self.embedding = uniform_param(rng, (vocab_size, d_embed), d_embed)
        self.init_state = Linear(rng, d_model, d_model)
        self.attn = MultiHeadAttention(rng, d_model, 1)
        self.w_x = Linear(rng, d_embed + d_model, 3 * d_model)
        self.w_h = Linear(rng, d_model, 3 * d_model, bias=False)
        self.output = Linear(rng, 2 * d_model, vocab_size)

    def _cell(self, x: Tensor, h: Tensor) -> Tensor:
        d = self.d_model
        xz, xr, xn = T.split(self.w_x(x), [d, d, d], axis=-1)
        hz, hr, hn = T.split(self.w_h(h), [d, d, d], axis=-1)
        z = T.sigmoid(T.add(xz, hz))
        r = T.sigmoid(T.add(xr, hr))
        n = T.tanh(T.add(xn, T.mul(r, hn)))
        return T.add(n, T.mul(z, T.sub(h, n)))

    def __call__(self, memory: Tensor, ids: np.ndarray, mem_mask: np.ndarray | None = None,
                 train: bool = False, rng=None) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        b, t = ids.shape
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IndexError(f"token id outside vocabulary of size {self.vocab_size}")
        o = memory.shape[1]
        m = np.ones((b, o)) if mem_mask is None else np.asarray(mem_mask, dtype=np.float64)
        w = Tensor((m / m.sum(axis=1, keepdims=True))[:, None, :], dtype=memory.data.dtype)
        mean_mem = T.reshape(T.matmul(w, memory), (b, self.d_model))
        h = T.tanh(self.init_state(mean_mem))
        emb = T.embedding_lookup(self.embedding, ids)
        steps = T.split(emb, [1] * t, axis=1) if t > 1 else [emb]
        mask = None if mem_mask is None else np.asarray(mem_mask, dtype=bool)[:, None, :]
        outs = []
        for x in steps:
            ctx = self.attn(T.reshape(h, (b, 1, self.d_model)), memory, memory, mask)
            ctx = T.reshape(ctx, (b, self.d_model))
            h = self._cell(T.concat([T.reshape(x, (b, x.shape[2])), ctx], axis=-1), h)
            logit = self.output(T.concat([h, ctx], axis=-1))
            outs.append(T.reshape(logit, (b, 1, self.vocab_size)))
        return outs[0] if t == 1 else T.concat(outs, axis=1)
