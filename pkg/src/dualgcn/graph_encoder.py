"""Object-level and image-level graph convolution over detected regions."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .nn import Module, uniform_param
from .tensor import Tensor

RELATION_LABELS: tuple[str, ...] = (
    "identity", "inside", "cover", "overlap",
    "dir_0", "dir_1", "dir_2", "dir_3", "dir_4", "dir_5", "dir_6", "dir_7",
)
N_RELATIONS = len(RELATION_LABELS)
REL_INDEX = {name: i for i, name in enumerate(RELATION_LABELS)}

Box = tuple[float, float, float, float]


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class RelationClass:
    label: str
    directed: bool

    @property
    def index(self) -> int:
        return REL_INDEX[self.label]


NO_RELATION = RelationClass("none", False)


@dataclass
class Region:
    feature: np.ndarray
    box: Box
    confidence: float = 1.0

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise GeometryError(f"degenerate box {self.box}")


@dataclass
class SpatialGraph:
    """Edges are ``(src, dst, relation)``; ``relation`` describes src relative to dst."""

    n_nodes: int
    edges: list[tuple[int, int, RelationClass]] = field(default_factory=list)

    def adjacency(self, n_pad: int | None = None) -> np.ndarray:
        """Per-relation masks ``A[r, dst, src]``."""
        n = n_pad or self.n_nodes
        a = np.zeros((N_RELATIONS, n, n), dtype=np.float32)
        for src, dst, rel in self.edges:
            a[rel.index, dst, src] = 1.0
        return a


def _check_box(b: Sequence[float]) -> None:
    if not (b[0] < b[2] and b[1] < b[3]):
        raise GeometryError(f"degenerate box {tuple(b)}")


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    _check_box(a)
    _check_box(b)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _contains(outer, inner) -> bool:
    return (outer[0] <= inner[0] and outer[1] <= inner[1]
            and outer[2] >= inner[2] and outer[3] >= inner[3])


def classify_relation(a: Sequence[float], b: Sequence[float], iou_threshold: float = 0.5,
                      dist_threshold: float = 0.5, image_diag: float | None = None) -> RelationClass:
    """Spatial relation of box ``a`` with respect to box ``b``.

    Directional bins use the angle of the vector from the centre of ``a`` to
    the centre of ``b``, ``dir_k`` with ``k = floor(angle / 45deg)``.
    ``image_diag`` defaults to the diagonal of the extent spanned from the
    origin to the far corner of both boxes.
    """
    _check_box(a)
    _check_box(b)
    same = tuple(a) == tuple(b)
    if not same and _contains(b, a):
        return RelationClass("inside", True)
    if not same and _contains(a, b):
        return RelationClass("cover", True)
    if iou(a, b) >= iou_threshold:
        return RelationClass("overlap", False)
    if image_diag is None:
        image_diag = math.hypot(max(a[2], b[2]), max(a[3], b[3]))
    dx = (b[0] + b[2]) / 2.0 - (a[0] + a[2]) / 2.0
    dy = (b[1] + b[3]) / 2.0 - (a[1] + a[3]) / 2.0
    if math.hypot(dx, dy) > dist_threshold * image_diag:
        return NO_RELATION
    angle = math.degrees(math.atan2(dy, dx)) % 360.0
    k = int(math.floor(round(angle, 9) / 45.0)) % 8
    return RelationClass(f"dir_{k}", True)


def build_spatial_graph(regions: Sequence[Region], max_regions: int = 36, iou_threshold: float = 0.5,
                        dist_threshold: float = 0.5, image_size: tuple[float, float] | None = None,
                        self_loop: bool = True) -> SpatialGraph:
    if not regions:
        raise ValueError("cannot build a spatial graph from zero regions")
    if len(regions) > max_regions:
        raise ValueError(f"{len(regions)} regions exceed the configured maximum {max_regions}")
    boxes = [r.box for r in regions]
    if image_size is None:
        diag = math.hypot(max(b[2] for b in boxes), max(b[3] for b in boxes))
    else:
        diag = math.hypot(*image_size)
    g = SpatialGraph(len(regions))
    for i, a in enumerate(boxes):
        if self_loop:
            g.edges.append((i, i, RelationClass("identity", False)))
        for j, b in enumerate(boxes):
            if i == j:
                continue
            rel = classify_relation(a, b, iou_threshold, dist_threshold, diag)
            if rel.label != "none":
                g.edges.append((i, j, rel))
    return g


class ObjectGCN(Module):
    """One weight matrix and bias per relation class, stored side by side."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.d_in, self.d_out = d_in, d_out
        self.weight = uniform_param(rng, (d_in, N_RELATIONS * d_out), d_in)
        self.bias = uniform_param(rng, (N_RELATIONS, d_out), d_in)

    def weight_for(self, label: str) -> np.ndarray:
        r = REL_INDEX[label]
        return self.weight.data[:, r * self.d_out:(r + 1) * self.d_out]

    def __call__(self, x: Tensor, adj: np.ndarray, activation: bool = True) -> Tensor:
        """``x``: (B, O, C); ``adj``: (B, R, O, O) masks indexed ``[b, r, dst, src]``."""
        b, o, c = x.shape
        if c != self.d_in:
            raise ValueError(f"object GCN expects feature width {self.d_in}, got {c}")
        r, d = N_RELATIONS, self.d_out
        msgs = T.reshape(T.matmul(x, self.weight), (b, o, r, d))
        msgs = T.reshape(T.transpose(msgs, (0, 2, 1, 3)), (b, r * o, d))
        a = np.ascontiguousarray(adj.transpose(0, 2, 1, 3).reshape(b, o, r * o))
        deg = adj.sum(axis=3).transpose(0, 2, 1)
        out = T.matmul(Tensor(a, dtype=x.data.dtype), msgs)
        out = T.add(out, T.matmul(Tensor(np.ascontiguousarray(deg), dtype=x.data.dtype), self.bias))
        return T.relu(out) if activation else out


def object_gcn_forward(graph: SpatialGraph, features: np.ndarray | Tensor, params: ObjectGCN,
                       activation: bool = True) -> Tensor:
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.shape[0] != graph.n_nodes:
        raise ValueError("feature rows do not match graph nodes")
    out = params(T.reshape(x, (1,) + x.shape), graph.adjacency()[None], activation)
    return T.reshape(out, out.shape[1:])


def pool_image(v_obj: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean over region rows. Batched input ``(B, O, d)`` honours a ``(B, O)`` mask."""
    if v_obj.ndim == 2:
        return T.mean(v_obj, axis=0)
    b, o, _ = v_obj.shape
    m = np.ones((b, o)) if mask is None else np.asarray(mask, dtype=np.float64)
    w = m / m.sum(axis=1, keepdims=True)
    pooled = T.matmul(Tensor(w[:, None, :], dtype=v_obj.data.dtype), v_obj)
    return T.reshape(pooled, (b, v_obj.shape[2]))


@dataclass
class ImageGraph:
    center_id: int
    center: np.ndarray
    neighbor_ids: list[int]
    neighbors: np.ndarray
    distances: list[float]


def knn_select(query_id, corpus: Mapping[int, np.ndarray], k: int,
               query: np.ndarray | None = None) -> ImageGraph:
    """K nearest images by squared L2 distance, excluding the query itself.

    Ties are broken by ascending id. ``query`` overrides the stored embedding
    (used for images outside the corpus).
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    center = np.asarray(corpus[query_id] if query is None else query, dtype=np.float64)
    scored = []
    for cid, vec in corpus.items():
        if cid == query_id:
            continue
        diff = np.asarray(vec, dtype=np.float64) - center
        scored.append((float((diff * diff).sum()), cid))
    scored.sort()
    chosen = scored[:k]
    d = center.shape[0]
    nb = np.array([corpus[c] for _, c in chosen], dtype=np.float64).reshape(len(chosen), d)
    return ImageGraph(query_id, center, [c for _, c in chosen], nb, [math.sqrt(s) for s, _ in chosen])


class NeighborIndex:
    """Frozen snapshot of pooled training-image embeddings for batched kNN."""

    def __init__(self, ids: Sequence[int], embeddings: np.ndarray):
        order = np.argsort(np.asarray(ids, dtype=np.int64), kind="stable")
        self.ids = np.asarray(ids, dtype=np.int64)[order]
        self.emb = np.asarray(embeddings, dtype=np.float64)[order]

    def __len__(self) -> int:
        return len(self.ids)

    def query(self, query_ids: Sequence[int], queries: np.ndarray, k: int,
              chunk: int = 128) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns ``(neighbor_ids, neighbor_embeddings, counts)`` padded to ``k``."""
        q = np.asarray(queries, dtype=np.float64)
        qids = np.asarray(query_ids, dtype=np.int64)
        n = len(q)
        kk = min(k, len(self.ids))
        out_ids = np.full((n, k), -1, dtype=np.int64)
        out_emb = np.zeros((n, k, self.emb.shape[1]), dtype=np.float64)
        counts = np.zeros(n, dtype=np.int64)
        sq = (self.emb * self.emb).sum(axis=1)
        n_cand = min(len(self.ids), kk + 16)
        for s in range(0, n, chunk):
            qc = q[s:s + chunk]
            # BLAS prefilter, then exact distances on a shortlist
            approx = sq[None, :] - 2.0 * qc @ self.emb.T
            approx[qids[s:s + chunk, None] == self.ids[None, :]] = np.inf
            short = np.argpartition(approx, n_cand - 1, axis=1)[:, :n_cand]
            for r in range(qc.shape[0]):
                cand = np.sort(short[r])
                cand = cand[np.isfinite(approx[r, cand])]
                diff = self.emb[cand] - qc[r]
                d2 = (diff * diff).sum(axis=1)
                # candidates are in ascending id order, so a stable sort breaks ties by id
                sel = cand[np.argsort(d2, kind="stable")[:kk]]
                counts[s + r] = len(sel)
                out_ids[s + r, :len(sel)] = self.ids[sel]
                out_emb[s + r, :len(sel)] = self.emb[sel]
        return out_ids, out_emb, counts


class ImageGCN(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.weight = uniform_param(rng, (d_in, d_out), d_in)
        self.bias = uniform_param(rng, (d_out,), d_in)

    def __call__(self, center: Tensor, neighbors: np.ndarray, counts: np.ndarray,
                 activation: bool = True) -> Tensor:
        """``center``: (B, d) with gradient; ``neighbors``: (B, K, d) constants.

        Sums ``W v + b`` over the centre and its valid neighbours.
        """
        b, d = center.shape
        if neighbors.shape[0] and neighbors.shape[2] != d:
            raise ValueError("neighbour width differs from centre width")
        dt = center.data.dtype
        total = center
        if neighbors.shape[1]:
            k = neighbors.shape[1]
            valid = (np.arange(k)[None, :] < np.asarray(counts)[:, None]).astype(np.float64)
            nb_sum = (neighbors * valid[:, :, None]).sum(axis=1)
            total = T.add(center, Tensor(nb_sum, dtype=dt))
        n_terms = Tensor((np.asarray(counts, dtype=np.float64) + 1.0)[:, None], dtype=dt)
        out = T.add(T.matmul(total, self.weight), T.matmul(n_terms, T.reshape(self.bias, (1, -1))))
        return T.relu(out) if activation else out


def image_gcn_forward(ig: ImageGraph, params: ImageGCN, activation: bool = True) -> Tensor:
    center = Tensor(ig.center[None, :])
    nb = np.asarray(ig.neighbors, dtype=np.float64)[None] if len(ig.neighbor_ids) else \
        np.zeros((1, 0, ig.center.shape[0]))
    out = params(center, nb, np.array([len(ig.neighbor_ids)]), activation)
    return T.reshape(out, (out.shape[1],))


def fuse(v_obj: Tensor, u_img: Tensor) -> Tensor:
    """Append the image-level vector to every region row.

    Accepts ``(O, d)`` with ``(d,)`` or batched ``(B, O, d)`` with ``(B, d)``.
    """
    dt = v_obj.data.dtype
    if v_obj.ndim == 2:
        ones = Tensor(np.ones((v_obj.shape[0], 1)), dtype=dt)
        tail = T.matmul(ones, T.reshape(u_img, (1, -1)))
        return T.concat([v_obj, tail], axis=1)
    b, o, _ = v_obj.shape
    ones = Tensor(np.ones((b, o, 1)), dtype=dt)
    tail = T.matmul(ones, T.reshape(u_img, (b, 1, u_img.shape[-1])))
    return T.concat([v_obj, tail], axis=2)
