"""Caption model: visual encoder variant + transformer encoder + decoder."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data_io.sample import SceneSample
from .data_io.vocab import BOS_ID, EOS_ID, PAD_ID, Vocabulary
from .graph_encoder import (N_RELATIONS, ImageGCN, NeighborIndex, ObjectGCN, build_spatial_graph, fuse,
                            pool_image)
from .nn import Linear, Module
from .recurrent import GRUDecoder
from .tensor import Tensor
from .transformer import TransformerDecoder, TransformerEncoder

# (local region features, image-level vector, source pooled for the image-level vector)
ENCODER_MODES: dict[str, tuple[str | None, str | None, str]] = {
    "F_obj": ("raw", None, "raw"),
    "GCN_obj": ("gcn", None, "raw"),
    "F_img": (None, "pool", "raw"),
    "GCN_img": (None, "img_gcn", "raw"),
    "GCN_obj&F_img": ("gcn", "pool", "raw"),
    "GCN_img&F_obj": ("raw", "img_gcn", "raw"),
    "Dual-GCN": ("gcn", "img_gcn", "gcn"),
}
DECODERS = ("transformer", "recurrent")


@dataclass
class ModelConfig:
    feature_dim: int = 2048
    max_regions: int = 36
    d_g: int = 512
    d_model: int = 512
    d_embed: int = 1000
    n_layers: int = 6
    n_heads: int = 8
    encoder_mode: str = "Dual-GCN"
    decoder: str = "transformer"
    K: int = 6
    dropout: float = 0.0
    self_loop: bool = True
    iou_threshold: float = 0.5
    dist_threshold: float = 0.5


@dataclass
class SceneTensors:
    """Padded, pre-built model inputs for a fixed list of samples."""

    ids: np.ndarray
    feats: np.ndarray        # (N, O, C)
    mask: np.ndarray         # (N, O) bool
    adj: np.ndarray          # (N, R, O, O)
    captions: list[list[list[int]]]
    references: list[list[str]]
    index: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def build(cls, samples: Sequence[SceneSample], vocab: Vocabulary, cfg: ModelConfig) -> "SceneTensors":
        n, o, c = len(samples), cfg.max_regions, cfg.feature_dim
        feats = np.zeros((n, o, c), dtype=np.float32)
        mask = np.zeros((n, o), dtype=bool)
        adj = np.zeros((n, N_RELATIONS, o, o), dtype=np.float32)
        captions, refs = [], []
        for k, s in enumerate(samples):
            f = s.features()
            if f.shape[1] != c:
                raise ValueError(f"sample {s.id}: feature width {f.shape[1]} != configured {c}")
            g = build_spatial_graph(s.regions, o, cfg.iou_threshold, cfg.dist_threshold, s.image_size,
                                    cfg.self_loop)
            m = len(s.regions)
            feats[k, :m] = f
            mask[k, :m] = True
            adj[k] = g.adjacency(o)
            captions.append([vocab.encode(r) for r in s.references])
            refs.append(list(s.references))
        ids = np.array([s.id for s in samples], dtype=np.int64)
        return cls(ids, feats, mask, adj, captions, refs, {int(i): k for k, i in enumerate(ids)})

    def subset(self, rows: Sequence[int]) -> "SceneTensors":
        rows = np.asarray(rows, dtype=np.int64)
        ids = self.ids[rows]
        return SceneTensors(ids, self.feats[rows], self.mask[rows], self.adj[rows],
                            [self.captions[r] for r in rows], [self.references[r] for r in rows],
                            {int(i): k for k, i in enumerate(ids)})


@dataclass
class Batch:
    ids: np.ndarray
    feats: np.ndarray
    mask: np.ndarray
    adj: np.ndarray
    nb_emb: np.ndarray | None = None
    nb_counts: np.ndarray | None = None

    @classmethod
    def take(cls, data: SceneTensors, rows: Sequence[int]) -> "Batch":
        rows = np.asarray(rows, dtype=np.int64)
        return cls(data.ids[rows], data.feats[rows], data.mask[rows], data.adj[rows])


def teacher_forcing_arrays(token_lists: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """``<bos> w1..wn`` inputs and ``w1..wn <eos>`` targets, right-padded."""
    t = max(len(x) for x in token_lists) + 1
    inp = np.full((len(token_lists), t), PAD_ID, dtype=np.int64)
    tgt = np.full((len(token_lists), t), PAD_ID, dtype=np.int64)
    for i, toks in enumerate(token_lists):
        inp[i, 0] = BOS_ID
        inp[i, 1:len(toks) + 1] = toks
        tgt[i, :len(toks)] = toks
        tgt[i, len(toks)] = EOS_ID
    return inp, tgt


class CaptionModel(Module):
    def __init__(self, cfg: ModelConfig, vocab_size: int, seed: int = 0):
        if cfg.encoder_mode not in ENCODER_MODES:
            raise ValueError(f"unknown encoder mode {cfg.encoder_mode!r}; choose from {sorted(ENCODER_MODES)}")
        if cfg.decoder not in DECODERS:
            raise ValueError(f"unknown decoder {cfg.decoder!r}")
        self.cfg = cfg
        self.vocab_size = vocab_size
        rng = np.random.default_rng(seed)
        local, glob, source = ENCODER_MODES[cfg.encoder_mode]
        self.local, self.glob, self.source = local, glob, source
        needs_gcn = local == "gcn" or source == "gcn"
        self.obj_gcn = ObjectGCN(rng, cfg.feature_dim, cfg.d_g) if needs_gcn else None
        src_dim = cfg.d_g if source == "gcn" else cfg.feature_dim
        self.img_gcn = ImageGCN(rng, src_dim, cfg.d_g) if glob == "img_gcn" else None
        width = {"raw": cfg.feature_dim, "gcn": cfg.d_g, None: 0}[local]
        width += {"pool": src_dim, "img_gcn": cfg.d_g, None: 0}[glob]
        self.input_width = width
        self.input_proj = Linear(rng, width, cfg.d_model)
        self.encoder = TransformerEncoder(rng, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.dropout)
        if cfg.decoder == "transformer":
            self.decoder = TransformerDecoder(rng, vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads,
                                              cfg.d_embed, cfg.dropout, PAD_ID)
        else:
            self.decoder = GRUDecoder(rng, vocab_size, cfg.d_model, cfg.d_embed, PAD_ID)

    @property
    def uses_neighbors(self) -> bool:
        return self.glob == "img_gcn"

    def _gcn(self, batch: Batch) -> Tensor:
        return self.obj_gcn(Tensor(batch.feats), batch.adj)

    def pooled(self, batch: Batch, gcn_out: Tensor | None = None) -> Tensor:
        """Image embedding that the similarity search runs on (mean over valid regions)."""
        if self.source == "gcn":
            src = gcn_out if gcn_out is not None else self._gcn(batch)
        else:
            src = Tensor(batch.feats)
        return pool_image(src, batch.mask)

    def fused(self, batch: Batch) -> tuple[Tensor, np.ndarray]:
        gcn_out = self._gcn(batch) if self.obj_gcn is not None else None
        local = None
        if self.local == "raw":
            local = Tensor(batch.feats)
        elif self.local == "gcn":
            local = gcn_out
        u = None
        if self.glob is not None:
            pooled = self.pooled(batch, gcn_out)
            if self.glob == "pool":
                u = pooled
            else:
                if batch.nb_emb is None:
                    raise ValueError("image-level GCN needs neighbour embeddings on the batch")
                u = self.img_gcn(pooled, batch.nb_emb, batch.nb_counts)
        if local is None:
            b = u.shape[0]
            return T.reshape(u, (b, 1, u.shape[1])), np.ones((b, 1), dtype=bool)
        if u is None:
            return local, batch.mask
        return fuse(local, u), batch.mask

    def encode(self, batch: Batch, train: bool = False, rng=None) -> tuple[Tensor, np.ndarray]:
        u, mask = self.fused(batch)
        x = self.input_proj(u)
        return self.encoder(x, mask, train, rng), mask

    def logits(self, memory: Tensor, mem_mask: np.ndarray, ids: np.ndarray, train: bool = False, rng=None) -> Tensor:
        return self.decoder(memory, ids, mem_mask, train, rng)

    def loss(self, batch: Batch, token_lists: Sequence[Sequence[int]], train: bool = True, rng=None) -> Tensor:
        memory, mask = self.encode(batch, train, rng)
        inp, tgt = teacher_forcing_arrays(token_lists)
        return T.cross_entropy(self.logits(memory, mask, inp, train, rng), tgt, PAD_ID)


def pooled_embeddings(model: CaptionModel, data: SceneTensors, rows: Sequence[int] | None = None,
                      batch_size: int = 256) -> np.ndarray:
    rows = np.arange(len(data)) if rows is None else np.asarray(rows)
    out = []
    for s in range(0, len(rows), batch_size):
        out.append(model.pooled(Batch.take(data, rows[s:s + batch_size])).data.astype(np.float64))
    width = model.cfg.d_g if model.source == "gcn" else model.cfg.feature_dim
    return np.concatenate(out) if out else np.zeros((0, width))


def build_neighbor_index(model: CaptionModel, data: SceneTensors, rows: Sequence[int]) -> NeighborIndex:
    rows = np.asarray(rows)
    return NeighborIndex(data.ids[rows], pooled_embeddings(model, data, rows))


def attach_neighbors(model: CaptionModel, batch: Batch, index: NeighborIndex | None,
                     cached: tuple[np.ndarray, np.ndarray] | None = None) -> Batch:
    """Fill the batch's neighbour arrays, from a per-epoch cache or a fresh query."""
    if not model.uses_neighbors:
        return batch
    if cached is not None:
        batch.nb_emb, batch.nb_counts = cached
        return batch
    if index is None or len(index) == 0:
        d = model.cfg.d_g if model.source == "gcn" else model.cfg.feature_dim
        batch.nb_emb = np.zeros((len(batch.ids), 0, d))
        batch.nb_counts = np.zeros(len(batch.ids), dtype=np.int64)
        return batch
    queries = model.pooled(batch).data
    _, emb, counts = index.query(batch.ids, queries, model.cfg.K)
    batch.nb_emb, batch.nb_counts = emb, counts
    return batch
