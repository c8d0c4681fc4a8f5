"""Teacher-forced training, evaluation and model checkpoints."""
from __future__ import annotations

import logging
import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data_io.vocab import Vocabulary
from .decoding import CaptionState, generate
from .graph_encoder import NeighborIndex
from .metrics import evaluate_corpus, summarize
from .model import Batch, CaptionModel, SceneTensors, attach_neighbors, pooled_embeddings
from .nn import Adam
from .tensor import NonFiniteError, Tape

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


def steps_for(epochs: float, n_samples: int, batch_size: int) -> int:
    return max(1, int(math.ceil(epochs * n_samples / batch_size)))


def build_model(cfg: RunConfig, vocab_size: int, seed: int) -> CaptionModel:
    return CaptionModel(cfg.model_config(), vocab_size, seed)


class Trainer:
    """Owns one model and its optimiser; feeds batches drawn from given rows.

    ``corpus_rows`` is the kNN corpus for the image-level GCN. Its pooled
    embeddings are refreshed once per epoch of ``corpus_rows``.
    """

    def __init__(self, model: CaptionModel, data: SceneTensors, corpus_rows: Sequence[int], cfg: RunConfig,
                 total_steps: int, seed: int):
        self.model = model
        self.data = data
        self.cfg = cfg
        self.corpus_rows = np.asarray(corpus_rows, dtype=np.int64)
        self.total_steps = total_steps
        self.opt = Adam(model.state_dict(), lr=cfg.lr, warmup_steps=int(cfg.warmup_frac * total_steps),
                        clip_norm=cfg.clip_norm)
        self.rng = np.random.default_rng([seed, 7919])
        self.steps_per_epoch = max(1, math.ceil(len(self.corpus_rows) / cfg.batch_size))
        self.index: NeighborIndex | None = None
        self._nb: dict[int, tuple[np.ndarray, int]] = {}
        self.seen_rows: set[int] = set()
        self.losses: list[float] = []
        self.stage = None
        # the shuffled pass in progress, so a resumed run draws the same batches
        self.pass_key = ""
        self.pass_order = np.zeros(0, dtype=np.int64)
        self.pass_pos = 0

    @property
    def step(self) -> int:
        return self.opt.step_count

    def refresh_neighbors(self) -> None:
        if not self.model.uses_neighbors:
            return
        emb = pooled_embeddings(self.model, self.data, self.corpus_rows)
        self.use_index(NeighborIndex(self.data.ids[self.corpus_rows], emb))

    def use_index(self, index: NeighborIndex) -> None:
        self.index = index
        _, nb, counts = index.query(index.ids, index.emb, self.cfg.K)
        self._nb = {self.data.index[int(i)]: (nb[j], int(counts[j])) for j, i in enumerate(index.ids)}

    def _neighbors_for(self, rows: np.ndarray):
        if not self.model.uses_neighbors:
            return None
        if self.index is None:
            self.refresh_neighbors()
        emb = np.stack([self._nb[int(r)][0] for r in rows])
        counts = np.array([self._nb[int(r)][1] for r in rows], dtype=np.int64)
        return emb, counts

    def train_step(self, rows: np.ndarray) -> float:
        if self.model.uses_neighbors and (self.index is None or self.step % self.steps_per_epoch == 0):
            self.refresh_neighbors()
        batch = attach_neighbors(self.model, Batch.take(self.data, rows), self.index, self._neighbors_for(rows))
        tokens = []
        for r in rows:
            caps = self.data.captions[r]
            tokens.append(caps[int(self.rng.integers(len(caps)))])
        self.seen_rows.update(int(r) for r in rows)
        try:
            with Tape() as tape:
                loss = self.model.loss(batch, tokens, train=True, rng=self.rng)
        except NonFiniteError as e:
            raise DivergenceError(f"non-finite forward at step {self.step} (stage {self.stage}): {e}") from e
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(f"loss became {value} at step {self.step} (stage {self.stage})")
        self.opt.zero_grad()
        tape.backward(loss)
        self.opt.step()
        self.losses.append(value)
        return value

    def run(self, rows: Sequence[int], n_steps: int) -> list[float]:
        """``n_steps`` updates cycling through shuffled passes over ``rows``.

        A pass cut short by ``n_steps`` is continued by the next call with
        the same rows, and dropped when the rows change.
        """
        rows = np.asarray(rows, dtype=np.int64)
        key = hashlib.sha1(rows.tobytes()).hexdigest()
        if key != self.pass_key:
            self.pass_key, self.pass_order, self.pass_pos = key, rows[:0], 0
        out: list[float] = []
        bs = self.cfg.batch_size
        while len(out) < n_steps:
            if self.pass_pos >= len(self.pass_order):
                self.pass_order, self.pass_pos = rows[self.rng.permutation(len(rows))], 0
            batch = self.pass_order[self.pass_pos:self.pass_pos + bs]
            self.pass_pos += bs
            out.append(self.train_step(batch))
        return out


def caption_rows(model: CaptionModel, data: SceneTensors, rows: Sequence[int], index: NeighborIndex | None,
                 max_len: int, beam: int = 1, alpha: float = 0.0, batch_size: int = 256) -> list[CaptionState]:
    rows = np.asarray(rows, dtype=np.int64)
    out: list[CaptionState] = []
    for s in range(0, len(rows), batch_size):
        batch = attach_neighbors(model, Batch.take(data, rows[s:s + batch_size]), index)
        out.extend(generate(model, batch, max_len, beam, alpha))
    return out


def evaluate(model: CaptionModel, data: SceneTensors, rows: Sequence[int], vocab: Vocabulary,
             index: NeighborIndex | None, cfg: RunConfig) -> tuple[list[dict], dict, list[str]]:
    states = caption_rows(model, data, rows, index, cfg.max_len, cfg.beam, cfg.length_alpha)
    caps = [vocab.decode(s.tokens) for s in states]
    refs = [data.references[r] for r in rows]
    per = evaluate_corpus([int(data.ids[r]) for r in rows], caps, refs)
    return per, summarize(per), caps


def model_header(cfg: RunConfig, vocab: Vocabulary, step: int, **extra) -> dict:
    h = {"config": cfg.to_dict(), "vocab": vocab.itos, "step": step}
    h.update(extra)
    return h


def save_model(path, model: CaptionModel, cfg: RunConfig, vocab: Vocabulary, opt: Adam | None = None,
               index: NeighborIndex | None = None, **extra) -> None:
    arrays = {k: p.data for k, p in model.state_dict().items()}
    header = model_header(cfg, vocab, opt.step_count if opt else 0, **extra)
    if opt is not None:
        arrays.update(opt.state_arrays())
    if index is not None:
        arrays["__knn__.emb"] = index.emb.astype(np.float32)
        header["knn_ids"] = [int(i) for i in index.ids]
    save_checkpoint(path, header, arrays)


def restore_model(ckpt: Checkpoint | str) -> tuple[CaptionModel, RunConfig, Vocabulary, NeighborIndex | None]:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    cfg = RunConfig(**ckpt.header["config"])
    vocab = Vocabulary(ckpt.header["vocab"][4:])
    model = build_model(cfg, len(vocab), cfg.seed)
    model.load_arrays(ckpt.arrays)
    index = None
    if "__knn__.emb" in ckpt.arrays:
        index = NeighborIndex(ckpt.header["knn_ids"], ckpt.arrays["__knn__.emb"])
    return model, cfg, vocab, index


def save_trainer(path, trainer: Trainer, vocab: Vocabulary, **extra) -> None:
    """Checkpoint everything needed to continue a run at the same step."""
    save_model(path, trainer.model, trainer.cfg, vocab, trainer.opt, trainer.index,
               total_steps=trainer.total_steps, trainer_rng=trainer.rng.bit_generator.state,
               corpus_rows=[int(r) for r in trainer.corpus_rows], losses=trainer.losses,
               pass_key=trainer.pass_key, pass_order=[int(r) for r in trainer.pass_order],
               pass_pos=trainer.pass_pos, **extra)


def restore_trainer(ckpt: Checkpoint | str, data: SceneTensors, cfg: RunConfig | None = None) -> Trainer:
    """Rebuild a :class:`Trainer` from a checkpoint written by :func:`save_trainer`."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    h = ckpt.header
    if "trainer_rng" not in h:
        raise ValueError("checkpoint holds no trainer state; it cannot be resumed")
    model, saved_cfg, _, index = restore_model(ckpt)
    cfg = cfg or saved_cfg
    trainer = Trainer(model, data, h["corpus_rows"], cfg, h["total_steps"], cfg.seed)
    trainer.opt.load_state_arrays(ckpt.arrays, h["step"])
    trainer.rng.bit_generator.state = h["trainer_rng"]
    trainer.losses = list(h.get("losses", []))
    trainer.pass_key, trainer.pass_pos = h.get("pass_key", ""), h.get("pass_pos", 0)
    trainer.pass_order = np.asarray(h.get("pass_order", []), dtype=np.int64)
    if index is not None and model.uses_neighbors:
        trainer.use_index(index)
    return trainer


@dataclass
class TrainResult:
    model: CaptionModel
    trainer: Trainer
    log_rows: list[dict] = field(default_factory=list)
    halted: bool = False

    def final_index(self) -> NeighborIndex | None:
        t = self.trainer
        if not t.model.uses_neighbors:
            return None
        t.refresh_neighbors()
        return t.index
