"""Versioned binary checkpoints.

Layout, little-endian::

    b"DGCN" | u32 version | u32 header_len | header JSON (config echo, vocab, step, ...)
    u32 n_blocks
    per block: u32 name_len | name utf-8 | u32 rank | rank*u32 extents | f32 data
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"DGCN"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict
    arrays: dict[str, np.ndarray]


def encode_checkpoint(header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    meta = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    def need(off, n, what):
        if off + n > len(buf):
            raise CheckpointError(f"truncated {what} at byte {off}: need {n}, have {len(buf) - off}")

    need(0, 12, "header")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    need(off, hlen + 4, "config header")
    header = json.loads(buf[off:off + hlen].decode("utf-8"))
    off += hlen
    (n_blocks,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays = {}
    for _ in range(n_blocks):
        need(off, 4, "block name length")
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, nlen + 4, "block name")
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, 4 * rank, f"shape of {name}")
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        need(off, 4 * count, f"data of {name}")
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes")
    return Checkpoint(header, arrays)


def save_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(header, arrays))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"missing checkpoint {p}")
    return decode_checkpoint(p.read_bytes())
