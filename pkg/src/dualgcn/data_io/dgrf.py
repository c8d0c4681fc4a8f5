"""DGRF region-feature files and their JSON-lines caption sidecar.

Layout, all little-endian::

    b"DGRF" | u32 version | u32 n_images
    per image: u64 id | u32 O | u32 C | O*4 f32 boxes | O f32 confidences | O*C f32 features
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..graph_encoder import Region
from .sample import SceneSample

MAGIC = b"DGRF"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_IMAGE = struct.Struct("<QII")


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode_region_features(samples: Sequence[SceneSample]) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(samples))]
    for s in samples:
        feats = np.stack([np.asarray(r.feature, dtype="<f4") for r in s.regions])
        o, c = feats.shape
        parts.append(_IMAGE.pack(int(s.id), o, c))
        parts.append(np.asarray([r.box for r in s.regions], dtype="<f4").tobytes())
        parts.append(np.asarray([r.confidence for r in s.regions], dtype="<f4").tobytes())
        parts.append(feats.tobytes())
    return b"".join(parts)


def write_region_features(path, samples: Sequence[SceneSample]) -> None:
    Path(path).write_bytes(encode_region_features(samples))


def write_captions(path, samples: Iterable[SceneSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {"id": int(s.id), "refs": list(s.references), "split": s.split}
            if s.image_size is not None:
                rec["image_size"] = [float(v) for v in s.image_size]
            fh.write(json.dumps(rec) + "\n")


def read_captions(path) -> dict[int, dict]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rec = json.loads(line)
                out[int(rec["id"])] = rec
    return out


def _take(buf: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(buf):
        raise FormatError(f"truncated {what}: expected {n} bytes, found {len(buf) - offset}", offset)
    return buf[offset:offset + n]


def decode_region_features(buf: bytes, max_regions: int = 36):
    """Yield ``(id, boxes, confidences, features)`` arrays, validating as it goes."""
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: expected {_HEADER.size} bytes, found {len(buf)}", 0)
    magic, version, n_images = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    off = _HEADER.size
    for _ in range(n_images):
        img_id, o, c = _IMAGE.unpack(_take(buf, off, _IMAGE.size, "image header"))
        if o == 0 or o > max_regions:
            raise FormatError(f"region count {o} outside 1..{max_regions}", off + 8)
        off += _IMAGE.size
        blocks = []
        for count, what in ((o * 4, "boxes"), (o, "confidences"), (o * c, "features")):
            raw = _take(buf, off, 4 * count, what)
            arr = np.frombuffer(raw, dtype="<f4")
            if not np.isfinite(arr).all():
                bad = int(np.flatnonzero(~np.isfinite(arr))[0])
                raise FormatError(f"non-finite value in {what}", off + 4 * bad)
            blocks.append(arr)
            off += 4 * count
        yield img_id, blocks[0].reshape(o, 4), blocks[1], blocks[2].reshape(o, c)
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after {n_images} images", off)


def load_region_features(path, captions_path=None, max_regions: int = 36) -> list[SceneSample]:
    """Parse a DGRF file; captions come from the sidecar when given.

    Without a sidecar each sample gets an empty-string placeholder reference
    and the ``test`` split, which is enough for captioning. A zero-byte file
    holds no images.
    """
    buf = Path(path).read_bytes()
    if not buf:
        return []
    caps = read_captions(captions_path) if captions_path else {}
    samples = []
    for img_id, boxes, conf, feats in decode_region_features(buf, max_regions):
        regions = [Region(feats[i].astype(np.float32), tuple(float(v) for v in boxes[i]), float(conf[i]))
                   for i in range(len(boxes))]
        rec = caps.get(img_id)
        if captions_path and rec is None:
            raise KeyError(f"image {img_id} has no entry in the caption sidecar")
        refs = rec["refs"] if rec else [""]
        split = rec.get("split", "train") if rec else "test"
        size = tuple(rec["image_size"]) if rec and rec.get("image_size") else None
        samples.append(SceneSample(int(img_id), regions, refs, split, size))
    return samples
