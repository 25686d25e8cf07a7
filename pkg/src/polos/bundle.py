"""Embedding bundle (PEB) file format.

A bundle carries precomputed encoder outputs for image/candidate/reference
groups, plus optional human scores, between the encoder sidecar and the
numeric core. The format is a fixed little-endian binary layout:

    header : magic "PEB1" | version u16 | d_clip u32 | d_rb u32
             | sample_count u64 | flags u32 (bit 0: scores present)
    record : id_len u32 | id utf-8 | n_refs u32
             | cand_clip f32[d_clip] | cand_rb f32[d_rb]
             | refs_clip f32[n_refs * d_clip] | refs_rb f32[n_refs * d_rb]
             | img f32[d_clip] | score f32 (NaN when scores absent)

Floats are 32-bit IEEE-754 on disk; consumers compute in float64.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"PEB1"
VERSION = 1
FLAG_SCORES = 0x1

_HEADER = struct.Struct("<4sHIIQI")
_U32 = struct.Struct("<I")

SPLIT_NAMES = ("train", "valid", "test")


class BundleError(Exception):
    """Raised for malformed bundles or invariant-violating samples."""


@dataclass
class BundleHeader:
    d_clip: int
    d_rb: int
    sample_count: int
    flags: int
    version: int = VERSION

    @property
    def has_scores(self) -> bool:
        return bool(self.flags & FLAG_SCORES)


@dataclass
class EmbeddingSample:
    """One image/candidate/references group with all encoder vectors.

    ``refs_clip`` and ``refs_rb`` are (n_refs, d) arrays; all vectors are
    float32 as stored on disk. ``score`` is the aggregated human judgment
    in [0, 1], or None when the group is unscored.
    """

    sample_id: str
    cand_clip: np.ndarray
    cand_rb: np.ndarray
    refs_clip: np.ndarray
    refs_rb: np.ndarray
    img: np.ndarray
    score: float | None = None

    @property
    def n_refs(self) -> int:
        return int(self.refs_clip.shape[0])

    @property
    def d_clip(self) -> int:
        return int(self.cand_clip.shape[0])

    @property
    def d_rb(self) -> int:
        return int(self.cand_rb.shape[0])

    def bitwise_equal(self, other: "EmbeddingSample") -> bool:
        if self.sample_id != other.sample_id:
            return False
        for a, b in (
            (self.cand_clip, other.cand_clip),
            (self.cand_rb, other.cand_rb),
            (self.refs_clip, other.refs_clip),
            (self.refs_rb, other.refs_rb),
            (self.img, other.img),
        ):
            if a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        if (self.score is None) != (other.score is None):
            return False
        if self.score is not None:
            return np.float32(self.score).tobytes() == np.float32(other.score).tobytes()
        return True


@dataclass
class DatasetSplit:
    name: str
    sample_ids: list[str]

    def __post_init__(self):
        if self.name not in SPLIT_NAMES:
            raise ValueError(f"unknown split name {self.name!r}")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError(f"duplicate sample ids in split {self.name!r}")


@dataclass
class ValidationReport:
    sample_count: int = 0
    d_clip: int | None = None
    d_rb: int | None = None
    scored_fraction: float = 0.0
    findings: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def to_dict(self) -> dict:
        return {
            "sample_count": self.sample_count,
            "d_clip": self.d_clip,
            "d_rb": self.d_rb,
            "scored_fraction": self.scored_fraction,
            "findings": [{"sample_id": s, "message": m} for s, m in self.findings],
        }


def _check_sample(sample: EmbeddingSample, d_clip: int, d_rb: int) -> None:
    """Raise BundleError on any invariant violation."""
    if sample.refs_clip.ndim != 2 or sample.refs_rb.ndim != 2:
        raise BundleError(f"{sample.sample_id}: reference arrays must be 2-D")
    if sample.refs_clip.shape[0] != sample.refs_rb.shape[0]:
        raise BundleError(f"{sample.sample_id}: ref count mismatch")
    if sample.n_refs < 1:
        raise BundleError(f"{sample.sample_id}: at least one reference required")
    if sample.cand_clip.shape != (d_clip,) or sample.img.shape != (d_clip,):
        raise BundleError(f"{sample.sample_id}: d_clip mismatch")
    if sample.cand_rb.shape != (d_rb,):
        raise BundleError(f"{sample.sample_id}: d_rb mismatch")
    if sample.refs_clip.shape[1] != d_clip or sample.refs_rb.shape[1] != d_rb:
        raise BundleError(f"{sample.sample_id}: reference dimension mismatch")
    for name, arr in (
        ("cand_clip", sample.cand_clip),
        ("cand_rb", sample.cand_rb),
        ("refs_clip", sample.refs_clip),
        ("refs_rb", sample.refs_rb),
        ("img", sample.img),
    ):
        if not np.all(np.isfinite(arr)):
            raise BundleError(f"{sample.sample_id}: non-finite values in {name}")
    if sample.score is not None and not (0.0 <= sample.score <= 1.0):
        raise BundleError(f"{sample.sample_id}: score out of range")


def _f32(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype="<f4")


def write_bundle(
    samples: list[EmbeddingSample],
    path: str | os.PathLike,
    d_clip: int | None = None,
    d_rb: int | None = None,
) -> int:
    """Serialize samples to a bundle file, returning the byte count written.

    Dimensions are taken from the first sample; pass them explicitly when
    writing an empty bundle. All samples must share the same dimensions and
    agree on score presence (the header flag applies to the whole file).
    """
    samples = list(samples)
    if samples:
        d_clip = samples[0].d_clip if d_clip is None else d_clip
        d_rb = samples[0].d_rb if d_rb is None else d_rb
    if d_clip is None or d_rb is None:
        raise BundleError("d_clip and d_rb are required for an empty bundle")
    if d_clip < 1 or d_rb < 1:
        raise BundleError("embedding dimensions must be >= 1")

    scored = [s.score is not None for s in samples]
    if any(scored) and not all(scored):
        raise BundleError("mixed score presence; bundles carry scores for all samples or none")
    flags = FLAG_SCORES if samples and all(scored) else 0

    for s in samples:
        _check_sample(s, d_clip, d_rb)

    tmp = str(path) + ".tmp"
    written = 0
    with open(tmp, "wb") as fh:
        written += fh.write(_HEADER.pack(MAGIC, VERSION, d_clip, d_rb, len(samples), flags))
        for s in samples:
            ident = s.sample_id.encode("utf-8")
            written += fh.write(_U32.pack(len(ident)))
            written += fh.write(ident)
            written += fh.write(_U32.pack(s.n_refs))
            for arr in (s.cand_clip, s.cand_rb, s.refs_clip, s.refs_rb, s.img):
                written += fh.write(_f32(arr).tobytes())
            score = np.float32(np.nan if s.score is None else s.score)
            written += fh.write(score.tobytes())
    os.replace(tmp, path)
    return written


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise BundleError("truncated payload")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def floats(self, count: int, shape: tuple) -> np.ndarray:
        raw = self.take(count * 4)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def read_header(path: str | os.PathLike) -> BundleHeader:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise BundleError("truncated payload")
    magic, version, d_clip, d_rb, count, flags = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise BundleError("bad magic")
    if version != VERSION:
        raise BundleError(f"unsupported version {version}")
    if d_clip < 1 or d_rb < 1:
        raise BundleError("invalid embedding dimensions in header")
    return BundleHeader(d_clip=d_clip, d_rb=d_rb, sample_count=count, flags=flags)


def read_bundle(path: str | os.PathLike) -> list[EmbeddingSample]:
    """Read a bundle, verifying layout and per-sample invariants.

    Round-trips are bit-exact: every float32 comes back unchanged.
    """
    header = read_header(path)
    with open(path, "rb") as fh:
        data = fh.read()
    rd = _Reader(data)
    rd.pos = _HEADER.size

    d_clip, d_rb = header.d_clip, header.d_rb
    samples: list[EmbeddingSample] = []
    for _ in range(header.sample_count):
        ident = rd.take(rd.u32()).decode("utf-8")
        n_refs = rd.u32()
        if n_refs < 1:
            raise BundleError(f"{ident}: at least one reference required")
        cand_clip = rd.floats(d_clip, (d_clip,))
        cand_rb = rd.floats(d_rb, (d_rb,))
        refs_clip = rd.floats(n_refs * d_clip, (n_refs, d_clip))
        refs_rb = rd.floats(n_refs * d_rb, (n_refs, d_rb))
        img = rd.floats(d_clip, (d_clip,))
        raw_score = rd.floats(1, (1,))[0]

        if header.has_scores:
            if np.isnan(raw_score):
                raise BundleError(f"{ident}: missing score in a scored bundle")
            score = float(raw_score)
        else:
            if not np.isnan(raw_score):
                raise BundleError(f"{ident}: unexpected score in an unscored bundle")
            score = None
        sample = EmbeddingSample(ident, cand_clip, cand_rb, refs_clip, refs_rb, img, score)
        _check_sample(sample, d_clip, d_rb)
        samples.append(sample)

    if rd.pos != len(data):
        raise BundleError("trailing data after last record")
    return samples


def validate_bundle(samples: list[EmbeddingSample]) -> ValidationReport:
    """Check every invariant, collecting findings instead of raising."""
    report = ValidationReport(sample_count=len(samples))
    if samples:
        report.d_clip = samples[0].d_clip
        report.d_rb = samples[0].d_rb
        report.scored_fraction = sum(s.score is not None for s in samples) / len(samples)
    seen: set[str] = set()
    for s in samples:
        if s.sample_id in seen:
            report.findings.append((s.sample_id, "duplicate sample id"))
        seen.add(s.sample_id)
        try:
            _check_sample(s, report.d_clip, report.d_rb)
        except BundleError as exc:
            message = str(exc).split(": ", 1)[-1]
            if "non-finite" in message:
                message = "non-finite vector"
            report.findings.append((s.sample_id, message))
    return report


def synth_samples(
    n: int,
    d_clip: int = 16,
    d_rb: int = 24,
    n_refs: int | tuple[int, int] = 3,
    with_scores: bool = True,
    seed: int = 0,
    scale: float = 1.0,
) -> list[EmbeddingSample]:
    """Deterministic synthetic bundle generator for tests and benchmarks.

    ``n_refs`` may be a fixed count or an inclusive (low, high) range.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    samples = []
    for i in range(n):
        if isinstance(n_refs, tuple):
            k = int(rng.integers(n_refs[0], n_refs[1] + 1))
        else:
            k = n_refs
        samples.append(
            EmbeddingSample(
                sample_id=f"s{i:06d}",
                cand_clip=(scale * rng.standard_normal(d_clip)).astype(np.float32),
                cand_rb=(scale * rng.standard_normal(d_rb)).astype(np.float32),
                refs_clip=(scale * rng.standard_normal((k, d_clip))).astype(np.float32),
                refs_rb=(scale * rng.standard_normal((k, d_rb))).astype(np.float32),
                img=(scale * rng.standard_normal(d_clip)).astype(np.float32),
                score=float(np.float32(rng.uniform())) if with_scores else None,
            )
        )
    return samples


def write_split_manifest(path: str | os.PathLike, entries: list[dict]) -> None:
    """Write the JSONL sidecar manifest (sample_id, split, source per line)."""
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_split_manifest(path: str | os.PathLike) -> list[dict]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries


def splits_from_manifest(entries: list[dict]) -> dict[str, DatasetSplit]:
    """Group manifest entries into the three canonical splits.

    Splits must be pairwise disjoint; an id assigned twice is an error.
    """
    by_split: dict[str, list[str]] = {name: [] for name in SPLIT_NAMES}
    seen: dict[str, str] = {}
    for e in entries:
        sid, split = e["sample_id"], e["split"]
        if split not in by_split:
            raise ValueError(f"unknown split name {split!r}")
        if sid in seen:
            raise ValueError(f"sample {sid!r} assigned to both {seen[sid]!r} and {split!r}")
        seen[sid] = split
        by_split[split].append(sid)
    return {name: DatasetSplit(name, ids) for name, ids in by_split.items()}
