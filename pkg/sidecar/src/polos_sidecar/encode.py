"""Manifest-driven encoding: images + captions in, embedding bundle out.

The manifest is JSONL, one sample per line:

    {"sample_id": ..., "image": path, "candidate": text,
     "references": [text, ...], "score": optional}

Embeddings are written exactly as produced; L2 normalization is applied only
when the corresponding policy flag is set, and the whole encoding policy
(encoder identifiers, token limit, normalization) is echoed into a JSON
metadata file next to the bundle so downstream experiments stay comparable.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from polos_sidecar.encoders import make_encoder
from polos_sidecar.peb import Record, read_records, write_records


class EncodeError(Exception):
    pass


@dataclass
class ManifestEntry:
    sample_id: str
    image: str
    candidate: str
    references: list[str]
    score: float | None = None

    def __post_init__(self):
        if not self.references:
            raise EncodeError(f"{self.sample_id}: empty reference list")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise EncodeError(f"{self.sample_id}: score outside [0, 1]")


@dataclass
class EncodePolicy:
    clip_encoder: str = "hash64:512"
    text_encoder: str = "hash64:1024"
    max_tokens: int = 77
    normalize_clip: bool = True
    normalize_text: bool = False
    device: str = "cpu"
    batch_size: int = 32

    def to_dict(self) -> dict:
        return {
            "clip_encoder": self.clip_encoder,
            "text_encoder": self.text_encoder,
            "max_tokens": self.max_tokens,
            "normalize_clip": self.normalize_clip,
            "normalize_text": self.normalize_text,
        }


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            entries.append(
                ManifestEntry(
                    sample_id=obj["sample_id"],
                    image=obj["image"],
                    candidate=obj["candidate"],
                    references=list(obj["references"]),
                    score=obj.get("score"),
                )
            )
    return entries


def _l2_normalize(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise EncodeError("cannot L2-normalize a zero embedding")
    return (rows / norms).astype(np.float32)


def _batched(encode_fn, items: list, batch_size: int) -> np.ndarray:
    parts = [encode_fn(items[i : i + batch_size]) for i in range(0, len(items), batch_size)]
    return np.concatenate(parts, axis=0)


def encode_manifest(entries: list[ManifestEntry], policy: EncodePolicy, out_path,
                    extend: bool = False) -> dict:
    """Encode all entries and write the bundle plus its metadata sidecar.

    With ``extend`` the output must already exist and carry matching
    dimensions; the new records are appended by rewriting the file (the
    format has no in-place append).
    """
    if not entries:
        raise EncodeError("empty manifest")
    ids = [e.sample_id for e in entries]
    if len(set(ids)) != len(ids):
        raise EncodeError("duplicate sample ids in manifest")

    clip = make_encoder(policy.clip_encoder, policy.max_tokens, policy.device)
    text = make_encoder(policy.text_encoder, policy.max_tokens, policy.device)

    # flat text lists: candidate first, then each sample's references
    all_texts = []
    for e in entries:
        all_texts.append(e.candidate)
        all_texts.extend(e.references)

    clip_text = _batched(clip.encode_texts, all_texts, policy.batch_size)
    rb_text = _batched(text.encode_texts, all_texts, policy.batch_size)
    images = _batched(clip.encode_images, [e.image for e in entries], policy.batch_size)
    if policy.normalize_clip:
        clip_text = _l2_normalize(clip_text)
        images = _l2_normalize(images)
    if policy.normalize_text:
        rb_text = _l2_normalize(rb_text)

    records = []
    cursor = 0
    for i, e in enumerate(entries):
        n = len(e.references)
        records.append(
            Record(
                sample_id=e.sample_id,
                cand_clip=clip_text[cursor],
                cand_rb=rb_text[cursor],
                refs_clip=clip_text[cursor + 1 : cursor + 1 + n],
                refs_rb=rb_text[cursor + 1 : cursor + 1 + n],
                img=images[i],
                score=e.score,
            )
        )
        cursor += 1 + n

    d_clip, d_rb = clip.dim, text.dim
    if extend:
        if not os.path.exists(out_path):
            raise EncodeError("extend requires an existing bundle")
        old_records, old_clip, old_rb = read_records(out_path)
        if (old_clip, old_rb) != (d_clip, d_rb):
            raise EncodeError(
                f"encoder mismatch with existing bundle: have ({old_clip}, {old_rb}), "
                f"encoders produce ({d_clip}, {d_rb})"
            )
        meta_path = str(out_path) + ".meta.json"
        if os.path.exists(meta_path):
            with open(meta_path) as fh:
                old_meta = json.load(fh)
            if old_meta.get("policy") != policy.to_dict():
                raise EncodeError("encoder mismatch with existing bundle metadata")
        collisions = {r.sample_id for r in old_records} & set(ids)
        if collisions:
            raise EncodeError(f"sample ids already present: {sorted(collisions)[:5]}")
        records = old_records + records

    written = write_records(records, out_path, d_clip, d_rb)
    meta = {
        "format": "PEB1",
        "policy": policy.to_dict(),
        "d_clip": d_clip,
        "d_rb": d_rb,
        "sample_count": len(records),
        "bytes": written,
    }
    tmp = str(out_path) + ".meta.json.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, str(out_path) + ".meta.json")
    return meta
