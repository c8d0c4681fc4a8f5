"""Synthetic scenes with template captions.

Each scene places 2-6 coloured shapes on a grid. Exactly one pair of objects
is closest together and every reference caption states the spatial relation
of that pair, optionally followed by a scene-context phrase. Region features
are attribute embeddings plus Gaussian noise.

With ``n_groups > 0`` scenes are drawn from recurring groups. A group fixes
the set of objects and the context phrase, but the context cue is only
visible in a fraction of its scenes, so similar scenes carry information a
single scene may lack.
"""
from __future__ import annotations

import itertools
import re
from dataclasses import dataclass

import numpy as np

from ..graph_encoder import Region
from .sample import SceneSample

INVERSE = {"above": "below", "below": "above", "left of": "right of", "right of": "left of"}

TEMPLATES = (
    "a {c1} {s1} {rel} a {c2} {s2}",
    "a {c2} {s2} {inv} a {c1} {s1}",
    "there is a {c1} {s1} {rel} a {c2} {s2}",
    "the {c1} {s1} is {rel} the {c2} {s2}",
    "the {c2} {s2} is {inv} the {c1} {s1}",
)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    grid_size: int = 6
    cell: float = 20.0
    shapes: tuple[str, ...] = ("circle", "square", "triangle", "star")
    colors: tuple[str, ...] = ("red", "blue", "green", "yellow")
    contexts: tuple[str, ...] = ()
    context_strength: float = 1.0
    n_groups: int = 0
    context_visibility: float = 1.0
    templates: tuple[str, ...] = TEMPLATES
    min_objects: int = 2
    max_objects: int = 6
    max_refs: int = 5
    feature_dim: int = 64
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        need = len(self.shapes) + len(self.colors) + 4 + len(self.contexts)
        if self.n_groups and not self.contexts:
            raise ValueError("scene groups need at least one context")
        if not 0.0 <= self.context_visibility <= 1.0:
            raise ValueError("context_visibility must lie in [0, 1]")
        if self.feature_dim < need:
            raise ValueError(f"feature_dim {self.feature_dim} cannot hold the {need}-dim attribute embedding")
        if self.max_objects > self.grid_size ** 2 or self.min_objects < 2:
            raise ValueError("object count range is not realisable on the grid")
        for t in self.templates:
            missing = {"{c1}", "{s1}", "{c2}", "{s2}"} - set(re.findall(r"\{\w+\}", t))
            if missing or not ({"{rel}", "{inv}"} & set(re.findall(r"\{\w+\}", t))):
                raise ValueError(f"template {t!r} is not realisable")

    @property
    def canvas(self) -> float:
        return self.grid_size * self.cell

    def groups(self) -> list[tuple[int, list[str], list[str]]]:
        """Per group: context index, object shapes and object colours."""
        rng = np.random.default_rng([self.seed, 104729])
        out = []
        for _ in range(self.n_groups):
            n = int(rng.integers(self.min_objects, self.max_objects + 1))
            shapes = [self.shapes[k] for k in rng.integers(0, len(self.shapes), n)]
            colors = [self.colors[k] for k in rng.integers(0, len(self.colors), n)]
            out.append((int(rng.integers(0, len(self.contexts))), shapes, colors))
        return out


def attribute_embedding(spec: SyntheticSceneSpec, shape: str, color: str, box, context: int | None) -> np.ndarray:
    v = np.zeros(spec.feature_dim, dtype=np.float64)
    ns, nc = len(spec.shapes), len(spec.colors)
    v[spec.shapes.index(shape)] = 1.0
    v[ns + spec.colors.index(color)] = 1.0
    v[ns + nc:ns + nc + 4] = np.asarray(box, dtype=np.float64) / spec.canvas
    if context is not None:
        v[ns + nc + 4 + context] = spec.context_strength
    return v


def _relation(subj_cell, obj_cell) -> str:
    (rs, cs), (ro, co) = subj_cell, obj_cell
    dy, dx = rs - ro, cs - co
    if abs(dy) >= abs(dx):
        return "above" if dy < 0 else "below"
    return "left of" if dx < 0 else "right of"


def _place(rng: np.random.Generator, spec: SyntheticSceneSpec, n: int):
    g = spec.grid_size
    while True:
        cells = rng.choice(g * g, size=n, replace=False)
        rc = [(int(c) // g, int(c) % g) for c in cells]
        d2 = sorted(((rc[i][0] - rc[j][0]) ** 2 + (rc[i][1] - rc[j][1]) ** 2, i, j)
                    for i, j in itertools.combinations(range(n), 2))
        if len(d2) == 1 or d2[0][0] < d2[1][0]:
            return rc, d2[0][1], d2[0][2]


def _make_sample(spec: SyntheticSceneSpec, index: int, split: str, groups=None) -> SceneSample:
    rng = np.random.default_rng([spec.seed, index])
    group, visible = None, True
    if groups is None:
        n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        cells, i, j = _place(rng, spec, n)
        shapes = [spec.shapes[k] for k in rng.integers(0, len(spec.shapes), n)]
        colors = [spec.colors[k] for k in rng.integers(0, len(spec.colors), n)]
        context = int(rng.integers(0, len(spec.contexts))) if spec.contexts else None
    else:
        group = int(rng.integers(0, spec.n_groups))
        context, shapes, colors = groups[group]
        n = len(shapes)
        cells, i, j = _place(rng, spec, n)
        visible = bool(rng.random() < spec.context_visibility)
    half = rng.uniform(0.3, 0.45, n) * spec.cell
    regions = []
    for k, (r, c) in enumerate(cells):
        cx, cy = (c + 0.5) * spec.cell, (r + 0.5) * spec.cell
        box = tuple(float(np.float32(v)) for v in (cx - half[k], cy - half[k], cx + half[k], cy + half[k]))
        feat = attribute_embedding(spec, shapes[k], colors[k], box, context if visible else None)
        if spec.noise > 0:
            feat = feat + rng.normal(0.0, spec.noise, spec.feature_dim)
        regions.append(Region(feat.astype(np.float32), box, 1.0))
    # subject is the earlier object in reading order
    s, o = (i, j) if cells[i] <= cells[j] else (j, i)
    rel = _relation(cells[s], cells[o])
    fill = dict(c1=colors[s], s1=shapes[s], c2=colors[o], s2=shapes[o], rel=rel, inv=INVERSE[rel])
    n_refs = int(rng.integers(1, min(spec.max_refs, len(spec.templates)) + 1))
    picks = rng.choice(len(spec.templates), size=n_refs, replace=False)
    suffix = f" {spec.contexts[context]}" if context is not None else ""
    refs = [spec.templates[p].format(**fill) + suffix for p in sorted(picks)]
    meta = {"fact": (colors[s], shapes[s], rel, colors[o], shapes[o]),
            "context": None if context is None else spec.contexts[context], "group": group}
    return SceneSample(index, regions, refs, split, (spec.canvas, spec.canvas), meta)


def generate_corpus(spec: SyntheticSceneSpec, n_samples: int, n_val: int = 0, n_test: int = 0) -> list[SceneSample]:
    """``n_samples`` scenes; the last ``n_val + n_test`` ids form the val and test splits."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if n_val + n_test >= n_samples:
        raise ValueError("validation and test splits leave no training samples")
    n_train = n_samples - n_val - n_test
    groups = spec.groups() if spec.n_groups else None
    out = []
    for idx in range(n_samples):
        split = "train" if idx < n_train else ("val" if idx < n_train + n_val else "test")
        out.append(_make_sample(spec, idx, split, groups))
    return out


def _template_regex(template: str, spec: SyntheticSceneSpec) -> re.Pattern:
    color = "|".join(map(re.escape, spec.colors))
    shape = "|".join(map(re.escape, spec.shapes))
    rels = "|".join(map(re.escape, INVERSE))
    pat = re.escape(template)
    for key, alt in (("c1", color), ("c2", color), ("s1", shape), ("s2", shape), ("rel", rels), ("inv", rels)):
        pat = pat.replace(re.escape("{" + key + "}"), f"(?P<{key}>{alt})")
    if spec.contexts:
        pat += "(?: (?P<ctx>" + "|".join(map(re.escape, spec.contexts)) + "))?"
    return re.compile(pat + "$")


def parse_caption(text: str, spec: SyntheticSceneSpec) -> tuple[tuple, str | None] | None:
    """Invert the template grammar: ``(fact, context)`` in subject-first form, or None."""
    for t in spec.templates:
        m = _template_regex(t, spec).match(text)
        if not m:
            continue
        d = m.groupdict()
        rel = d["rel"] if d.get("rel") else INVERSE[d["inv"]]
        return (d["c1"], d["s1"], rel, d["c2"], d["s2"]), d.get("ctx")
    return None
