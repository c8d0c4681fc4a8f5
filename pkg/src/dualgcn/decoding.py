"""Greedy and beam-search caption generation.

Both searches take a ``step_fn`` that maps a batch of prefixes ``(n, t)``
(always starting with ``<bos>``) to next-token log-probabilities ``(n, V)``,
so they can run on a model or on a hand-written table.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data_io.vocab import BOS_ID, EOS_ID
from .model import Batch, CaptionModel
from .tensor import Tensor

StepFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class CaptionState:
    tokens: list[int] = field(default_factory=lambda: [BOS_ID])
    logprobs: list[float] = field(default_factory=list)
    finished: bool = False

    @property
    def score(self) -> float:
        return float(sum(self.logprobs))

    def words(self) -> list[int]:
        """Generated ids without ``<bos>`` and the trailing ``<eos>``."""
        out = self.tokens[1:]
        return out[:-1] if out and out[-1] == EOS_ID else out


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def greedy(step_fn: StepFn, batch_size: int, max_len: int) -> list[CaptionState]:
    states = [CaptionState() for _ in range(batch_size)]
    prefix = np.full((batch_size, 1), BOS_ID, dtype=np.int64)
    alive = np.ones(batch_size, dtype=bool)
    for _ in range(max_len):
        lp = step_fn(prefix)
        nxt = lp.argmax(axis=1)
        for i in np.flatnonzero(alive):
            states[i].tokens.append(int(nxt[i]))
            states[i].logprobs.append(float(lp[i, nxt[i]]))
            if nxt[i] == EOS_ID:
                states[i].finished = True
                alive[i] = False
        if not alive.any():
            break
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    for s in states:
        s.finished = True
    return states


def beam_search(step_fn: StepFn, beam_width: int, max_len: int, alpha: float = 0.0) -> CaptionState:
    """Beam search over cumulative log-probability.

    Each step keeps the ``beam_width`` best expansions overall; those ending in
    ``<eos>`` (or reaching ``max_len``) leave the beam as finished hypotheses.
    Final ranking divides the score by ``length ** alpha``.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")

    def norm(score: float, length: int) -> float:
        return score / (length ** alpha) if alpha else score

    live: list[CaptionState] = [CaptionState()]
    done: list[CaptionState] = []
    for step in range(max_len):
        prefix = np.array([s.tokens for s in live], dtype=np.int64)
        lp = step_fn(prefix)
        cands = []
        for b, s in enumerate(live):
            base = s.score
            for tok in range(lp.shape[1]):
                cands.append((base + float(lp[b, tok]), b, tok))
        # ties go to the earlier beam and the smaller token id
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        new_live = []
        for total, b, tok in cands[:beam_width]:
            src = live[b]
            st = CaptionState(src.tokens + [tok], src.logprobs + [float(lp[b, tok])])
            if tok == EOS_ID or step == max_len - 1:
                st.finished = True
                done.append(st)
            else:
                new_live.append(st)
        live = new_live
        if not live:
            break
        if alpha == 0.0 and done:
            # scores only fall as hypotheses grow, so a finished leader is final
            if max(d.score for d in done) >= max(s.score for s in live):
                break
    best = max(done, key=lambda s: (norm(s.score, len(s.tokens) - 1), -len(s.tokens)))
    return best


def model_step_fn(model: CaptionModel, memory: Tensor, mask: np.ndarray, row: int | None = None) -> StepFn:
    """Step function over encoded memory, or one row of it broadcast to every prefix."""

    def step(prefix: np.ndarray) -> np.ndarray:
        if row is None:
            mem, m = memory, mask
        else:
            n = prefix.shape[0]
            mem = Tensor(np.repeat(memory.data[row:row + 1], n, axis=0), dtype=memory.data.dtype)
            m = np.repeat(mask[row:row + 1], n, axis=0)
        logits = model.logits(mem, m, prefix).data[:, -1, :].astype(np.float64)
        return _log_softmax(logits)

    return step


def generate(model: CaptionModel, batch: Batch, max_len: int = 16, beam_width: int = 1,
             alpha: float = 0.0) -> list[CaptionState]:
    """Caption every image of a batch (neighbour arrays must already be attached)."""
    memory, mask = model.encode(batch)
    if beam_width == 1:
        return greedy(model_step_fn(model, memory, mask), len(batch.ids), max_len)
    return [beam_search(model_step_fn(model, memory, mask, r), beam_width, max_len, alpha)
            for r in range(len(batch.ids))]
