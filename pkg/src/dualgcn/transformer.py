"""Transformer encoder/decoder over fused visual embeddings."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, uniform_param
from .tensor import Tensor


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head query/key/value projections.

    The query/key/value maps carry no bias, the output projection does.
    """

    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.w_q = uniform_param(rng, (d_model, d_model), d_model)
        self.w_k = uniform_param(rng, (d_model, d_model), d_model)
        self.w_v = uniform_param(rng, (d_model, d_model), d_model)
        self.out = Linear(rng, d_model, d_model)

    def _heads(self, x: Tensor, w: Tensor) -> Tensor:
        b, t, _ = x.shape
        y = T.reshape(T.matmul(x, w), (b, t, self.n_heads, self.d_head))
        return T.transpose(y, (0, 2, 1, 3))

    def __call__(self, queries: Tensor, keys: Tensor, values: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        """``mask`` is boolean, broadcastable to (B, Tq, Tk); True marks visible keys."""
        b, tq, d = queries.shape
        if keys.shape[1] != values.shape[1]:
            raise ValueError("keys and values must have the same length")
        q = self._heads(queries, self.w_q)
        k = T.transpose(self._heads(keys, self.w_k), (0, 1, 3, 2))
        v = self._heads(values, self.w_v)
        scores = T.scale(T.matmul(q, k), 1.0 / math.sqrt(self.d_head))
        if mask is not None:
            mask = np.broadcast_to(np.asarray(mask, dtype=bool), (b, tq, keys.shape[1]))[:, None]
        attn = T.softmax(scores, axis=-1, mask=mask)
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, tq, d))
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, d_model: int, d_inner: int):
        self.lin1 = Linear(rng, d_model, d_inner)
        self.lin2 = Linear(rng, d_inner, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(T.relu(self.lin1(x)))


class EncoderLayer(Module):
    def __init__(self, rng, d_model: int, n_heads: int, dropout: float = 0.0):
        self.attn = MultiHeadAttention(rng, d_model, n_heads)
        self.norm1 = LayerNorm(d_model)
        self.ffn = FeedForward(rng, d_model, 4 * d_model)
        self.norm2 = LayerNorm(d_model)
        self.dropout = dropout

    def __call__(self, x: Tensor, key_mask: np.ndarray | None, train: bool = False, rng=None) -> Tensor:
        mask = None if key_mask is None else key_mask[:, None, :]
        att = T.dropout(self.attn(x, x, x, mask), self.dropout, train, rng)
        x = self.norm1(T.add(x, att))
        ff = T.dropout(self.ffn(x), self.dropout, train, rng)
        return self.norm2(T.add(x, ff))


class DecoderLayer(Module):
    def __init__(self, rng, d_model: int, n_heads: int, dropout: float = 0.0):
        self.self_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.norm1 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.norm2 = LayerNorm(d_model)
        self.ffn = FeedForward(rng, d_model, 4 * d_model)
        self.norm3 = LayerNorm(d_model)
        self.dropout = dropout

    def __call__(self, y: Tensor, memory: Tensor, self_mask: np.ndarray, mem_mask: np.ndarray | None,
                 train: bool = False, rng=None) -> Tensor:
        a = T.dropout(self.self_attn(y, y, y, self_mask), self.dropout, train, rng)
        y = self.norm1(T.add(y, a))
        cm = None if mem_mask is None else mem_mask[:, None, :]
        c = T.dropout(self.cross_attn(y, memory, memory, cm), self.dropout, train, rng)
        y = self.norm2(T.add(y, c))
        f = T.dropout(self.ffn(y), self.dropout, train, rng)
        return self.norm3(T.add(y, f))


class TransformerEncoder(Module):
    """Stack of self-attention layers; no positional encoding (regions form a set)."""

    def __init__(self, rng, d_model: int, n_layers: int, n_heads: int, dropout: float = 0.0):
        self.layers = [EncoderLayer(rng, d_model, n_heads, dropout) for _ in range(n_layers)]

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None, train: bool = False, rng=None) -> Tensor:
        for layer in self.layers:
            x = layer(x, key_mask, train, rng)
        return x


def sinusoidal_encoding(length: int, d: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


class TransformerDecoder(Module):
    """Token embedding + sinusoidal positions, masked self-attention, cross-attention, vocab logits.

    When ``d_embed`` differs from ``d_model`` the embedding is linearly mapped
    to the model width.
    """

    def __init__(self, rng, vocab_size: int, d_model: int, n_layers: int, n_heads: int,
                 d_embed: int | None = None, dropout: float = 0.0, pad_id: int = 0):
        d_embed = d_embed or d_model
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.pad_id = pad_id
        self.embedding = uniform_param(rng, (vocab_size, d_embed), d_embed)
        self.embed_proj = Linear(rng, d_embed, d_model) if d_embed != d_model else None
        self.layers = [DecoderLayer(rng, d_model, n_heads, dropout) for _ in range(n_layers)]
        self.output = Linear(rng, d_model, vocab_size)
        self.dropout = dropout

    def __call__(self, memory: Tensor, ids: np.ndarray, mem_mask: np.ndarray | None = None,
                 train: bool = False, rng=None) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        b, t = ids.shape
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IndexError(f"token id outside vocabulary of size {self.vocab_size}")
        y = T.embedding_lookup(self.embedding, ids)
        if self.embed_proj is not None:
            y = self.embed_proj(y)
        pe = sinusoidal_encoding(t, self.d_model)
        y = T.add(y, Tensor(np.broadcast_to(pe, (b, t, self.d_model)), dtype=y.data.dtype))
        y = T.dropout(y, self.dropout, train, rng)
        self_mask = causal_mask(t)[None] & (ids != self.pad_id)[:, None, :]
        for layer in self.layers:
            y = layer(y, memory, self_mask, mem_mask, train, rng)
        return self.output(y)


def word_distribution(logits: Tensor) -> Tensor:
    return T.softmax(logits, axis=-1)
