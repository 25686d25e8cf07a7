"""Writer for the embedding-bundle wire format (PEB v1).

This mirrors the consumer's published byte layout so the sidecar talks to it
strictly through files:

    header : magic "PEB1" | version u16 | d_clip u32 | d_rb u32
             | sample_count u64 | flags u32 (bit 0: scores present)
    record : id_len u32 | id utf-8 | n_refs u32
             | cand_clip f32[d_clip] | cand_rb f32[d_rb]
             | refs_clip f32[n_refs * d_clip] | refs_rb f32[n_refs * d_rb]
             | img f32[d_clip] | score f32 (NaN when scores absent)

All integers and floats are little-endian.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"PEB1"
VERSION = 1
FLAG_SCORES = 0x1

_HEADER = struct.Struct("<4sHIIQI")
_U32 = struct.Struct("<I")


class PebError(Exception):
    pass


@dataclass
class Record:
    sample_id: str
    cand_clip: np.ndarray
    cand_rb: np.ndarray
    refs_clip: np.ndarray  # (n_refs, d_clip)
    refs_rb: np.ndarray  # (n_refs, d_rb)
    img: np.ndarray
    score: float | None = None


def _f32(arr) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype="<f4")
    if not np.all(np.isfinite(out)):
        raise PebError("non-finite embedding value")
    return out


def write_records(records: list[Record], path, d_clip: int, d_rb: int) -> int:
    """Serialize records, returning bytes written. The write is atomic."""
    scored = [r.score is not None for r in records]
    if any(scored) and not all(scored):
        raise PebError("either every record carries a score or none do")
    flags = FLAG_SCORES if records and all(scored) else 0

    tmp = str(path) + ".tmp"
    written = 0
    with open(tmp, "wb") as fh:
        written += fh.write(_HEADER.pack(MAGIC, VERSION, d_clip, d_rb, len(records), flags))
        for r in records:
            n_refs = r.refs_clip.shape[0]
            if n_refs < 1 or r.refs_rb.shape[0] != n_refs:
                raise PebError(f"{r.sample_id}: bad reference count")
            ident = r.sample_id.encode("utf-8")
            written += fh.write(_U32.pack(len(ident)))
            written += fh.write(ident)
            written += fh.write(_U32.pack(n_refs))
            for arr, width in (
                (r.cand_clip, d_clip),
                (r.cand_rb, d_rb),
                (r.refs_clip, d_clip),
                (r.refs_rb, d_rb),
                (r.img, d_clip),
            ):
                data = _f32(arr)
                if data.shape[-1] != width:
                    raise PebError(f"{r.sample_id}: dimension mismatch")
                written += fh.write(data.tobytes())
            score = np.float32(np.nan if r.score is None else r.score)
            written += fh.write(score.tobytes())
    os.replace(tmp, path)
    return written


def read_dims(path) -> tuple[int, int, int]:
    """(d_clip, d_rb, sample_count) from an existing bundle's header."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise PebError("truncated header")
    magic, version, d_clip, d_rb, count, _ = _HEADER.unpack(raw)
    if magic != MAGIC or version != VERSION:
        raise PebError("not a v1 embedding bundle")
    return d_clip, d_rb, count


def read_records(path) -> tuple[list[Record], int, int]:
    """Read a whole bundle back (used when extending an existing file)."""
    d_clip, d_rb, count = read_dims(path)
    with open(path, "rb") as fh:
        data = fh.read()
    pos = _HEADER.size
    flags = _HEADER.unpack(data[: _HEADER.size])[5]

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise PebError("truncated payload")
        out = data[pos : pos + n]
        pos += n
        return out

    def floats(n: int, shape) -> np.ndarray:
        return np.frombuffer(take(n * 4), dtype="<f4").reshape(shape).copy()

    records = []
    for _ in range(count):
        ident = take(_U32.unpack(take(4))[0]).decode("utf-8")
        n_refs = _U32.unpack(take(4))[0]
        cand_clip = floats(d_clip, (d_clip,))
        cand_rb = floats(d_rb, (d_rb,))
        refs_clip = floats(n_refs * d_clip, (n_refs, d_clip))
        refs_rb = floats(n_refs * d_rb, (n_refs, d_rb))
        img = floats(d_clip, (d_clip,))
        raw_score = floats(1, (1,))[0]
        score = float(raw_score) if (flags & FLAG_SCORES) else None
        records.append(Record(ident, cand_clip, cand_rb, refs_clip, refs_rb, img, score))
    if pos != len(data):
        raise PebError("trailing data after last record")
    return records, d_clip, d_rb
