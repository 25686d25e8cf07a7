"""Encoder registry.

Encoders are addressed by an identifier string stamped into the bundle
metadata:

    hash64:<dim>      deterministic pseudo-embeddings (no model downloads;
                      for fixtures, smoke tests, and plumbing validation)
    clip:<model-id>   CLIP text + image towers via transformers
    simcse:<model-id> RoBERTa sentence embeddings, CLS-token pooling

The hash encoder derives each vector from a SHA-256 of the input, so equal
inputs give bitwise-equal embeddings and runs are reproducible anywhere.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


class EncoderError(Exception):
    pass


@dataclass
class TextBatch:
    texts: list[str]


class HashEncoder:
    """Deterministic stand-in encoder: sha256(input) seeds a normal vector."""

    def __init__(self, dim: int, max_tokens: int = 77):
        if dim < 1:
            raise EncoderError("dimension must be >= 1")
        self.dim = dim
        self.max_tokens = max_tokens

    def _vector(self, payload: bytes) -> np.ndarray:
        digest = hashlib.sha256(payload).digest()
        seed = int.from_bytes(digest[:8], "little")
        rng = np.random.Generator(np.random.PCG64(seed))
        return rng.standard_normal(self.dim).astype(np.float32)

    def truncate(self, text: str) -> str:
        return " ".join(text.split()[: self.max_tokens])

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        return np.stack([self._vector(self.truncate(t).encode("utf-8")) for t in texts])

    def encode_images(self, paths: list[str]) -> np.ndarray:
        from PIL import Image

        vectors = []
        for path in paths:
            try:
                with Image.open(path) as im:
                    im = im.convert("RGB")
                    payload = im.tobytes()
            except OSError as exc:
                raise EncoderError(f"unreadable image {path}: {exc}") from exc
            vectors.append(self._vector(payload))
        return np.stack(vectors)


class ClipEncoder:
    """CLIP text/image towers (ViT-B/16 by default) through transformers."""

    def __init__(self, model_id: str, max_tokens: int = 77, device: str = "cpu"):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise EncoderError("clip encoder needs torch and transformers installed") from exc
        self.torch = torch
        self.device = device
        self.max_tokens = max_tokens
        self.model = CLIPModel.from_pretrained(model_id).to(device).eval()
        self.processor = CLIPProcessor.from_pretrained(model_id)
        self.dim = int(self.model.config.projection_dim)

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        inputs = self.processor(
            text=texts, return_tensors="pt", padding=True,
            truncation=True, max_length=self.max_tokens,
        ).to(self.device)
        with self.torch.no_grad():
            features = self.model.get_text_features(**inputs)
        return features.cpu().numpy().astype(np.float32)

    def encode_images(self, paths: list[str]) -> np.ndarray:
        from PIL import Image

        images = []
        for path in paths:
            try:
                with Image.open(path) as im:
                    images.append(im.convert("RGB"))
            except OSError as exc:
                raise EncoderError(f"unreadable image {path}: {exc}") from exc
        inputs = self.processor(images=images, return_tensors="pt").to(self.device)
        with self.torch.no_grad():
            features = self.model.get_image_features(**inputs)
        return features.cpu().numpy().astype(np.float32)


class SimcseEncoder:
    """Sentence embeddings from a SimCSE-style RoBERTa: CLS-token output."""

    def __init__(self, model_id: str, max_tokens: int = 128, device: str = "cpu"):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise EncoderError("simcse encoder needs torch and transformers installed") from exc
        self.torch = torch
        self.device = device
        self.max_tokens = max_tokens
        self.model = AutoModel.from_pretrained(model_id).to(device).eval()
        self.tokenizer = AutoTokenizer.from_pretrained(model_id)
        self.dim = int(self.model.config.hidden_size)

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        inputs = self.tokenizer(
            texts, return_tensors="pt", padding=True,
            truncation=True, max_length=self.max_tokens,
        ).to(self.device)
        with self.torch.no_grad():
            out = self.model(**inputs)
        cls = out.last_hidden_state[:, 0]
        return cls.cpu().numpy().astype(np.float32)

    def encode_images(self, paths):
        raise EncoderError("text-only encoder cannot embed images")


def make_encoder(identifier: str, max_tokens: int, device: str = "cpu"):
    """Instantiate an encoder from its identifier string."""
    kind, _, arg = identifier.partition(":")
    if kind == "hash64":
        try:
            dim = int(arg)
        except ValueError as exc:
            raise EncoderError(f"hash64 needs a dimension, got {arg!r}") from exc
        return HashEncoder(dim, max_tokens=max_tokens)
    if kind == "clip":
        return ClipEncoder(arg or "openai/clip-vit-base-patch16",
                           max_tokens=max_tokens, device=device)
    if kind == "simcse":
        return SimcseEncoder(arg or "princeton-nlp/sup-simcse-roberta-base",
                             max_tokens=max_tokens, device=device)
    raise EncoderError(f"unknown encoder identifier {identifier!r}")
