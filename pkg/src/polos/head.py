"""Scoring head for candidate captions.

Per reference, the head fuses candidate/reference/image embeddings into a
similarity feature vector, runs it through two MLPs, squashes the output
logit with a sigmoid, and aggregates the per-reference scores (max or mean)
into a single prediction in (0, 1). Exact analytic gradients of the squared
error against a human score are provided for training.

Vectors arrive as float32 (the bundle's disk precision); all arithmetic here
is float64.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from polos import kernels
from polos.bundle import EmbeddingSample

AGGREGATES = ("max", "mean")
FUSION_MODES = ("full", "concat_only")
ACTIVATIONS = ("relu", "linear")

_CKPT_MAGIC = b"PCK1"


class HeadError(ValueError):
    """Configuration, dimension, or numeric failure in the scoring head."""


@dataclass(frozen=True)
class HeadConfig:
    """Architecture and ablation switches for the scoring head.

    ``fusion_mode="concat_only"`` replaces the fused feature [c; r; |c-r|; c*r]
    with the plain concatenation [c; r] everywhere. The three ``use_*`` flags
    drop entire input streams; at least one text stream must stay enabled.
    """

    aggregate: str = "max"
    fusion_mode: str = "full"
    use_image: bool = True
    use_clip_text: bool = True
    use_roberta: bool = True
    d_h: int = 512
    mlp1_hidden: tuple[int, ...] = (1024,)
    mlp2_hidden: tuple[int, ...] = (128,)
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if self.aggregate not in AGGREGATES:
            raise HeadError(f"aggregate must be one of {AGGREGATES}")
        if self.fusion_mode not in FUSION_MODES:
            raise HeadError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.activation != "relu":
            raise HeadError("only relu hidden activation is supported")
        if not (self.use_clip_text or self.use_roberta):
            raise HeadError("at least one text stream must be enabled")
        if self.d_h < 1 or any(h < 1 for h in self.mlp1_hidden + self.mlp2_hidden):
            raise HeadError("layer widths must be positive")
        object.__setattr__(self, "mlp1_hidden", tuple(self.mlp1_hidden))
        object.__setattr__(self, "mlp2_hidden", tuple(self.mlp2_hidden))

    @property
    def fused_factor(self) -> int:
        return 4 if self.fusion_mode == "full" else 2

    def h_inter_dim(self, d_clip: int, d_rb: int) -> int:
        f = self.fused_factor
        dim = 0
        if self.use_clip_text:
            dim += f * d_clip
        if self.use_image:
            dim += f * d_clip
        if self.use_roberta:
            dim += f * d_rb
        return dim

    def to_dict(self) -> dict:
        return {
            "aggregate": self.aggregate,
            "fusion_mode": self.fusion_mode,
            "use_image": self.use_image,
            "use_clip_text": self.use_clip_text,
            "use_roberta": self.use_roberta,
            "d_h": self.d_h,
            "mlp1_hidden": list(self.mlp1_hidden),
            "mlp2_hidden": list(self.mlp2_hidden),
            "activation": self.activation,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        d = dict(d)
        d["mlp1_hidden"] = tuple(d.get("mlp1_hidden", (1024,)))
        d["mlp2_hidden"] = tuple(d.get("mlp2_hidden", (128,)))
        return cls(**d)


@dataclass
class Layer:
    weight: np.ndarray  # (out, in) float64
    bias: np.ndarray  # (out,) float64
    activation: str  # "relu" or "linear"


@dataclass
class HeadParams:
    """Weights of the two MLPs; layer order fixes the flat array layout."""

    mlp1: list[Layer]
    mlp2: list[Layer]

    def layers(self) -> list[Layer]:
        return self.mlp1 + self.mlp2

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers():
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def with_arrays(self, arrays: list[np.ndarray]) -> "HeadParams":
        expected = 2 * (len(self.mlp1) + len(self.mlp2))
        if len(arrays) != expected:
            raise HeadError(f"expected {expected} arrays, got {len(arrays)}")
        it = iter(arrays)
        mlp1 = [Layer(next(it), next(it), l.activation) for l in self.mlp1]
        mlp2 = [Layer(next(it), next(it), l.activation) for l in self.mlp2]
        return HeadParams(mlp1, mlp2)

    def copy(self) -> "HeadParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def input_dim(self) -> int:
        return int(self.mlp1[0].weight.shape[1])

    def validate_chain(self) -> None:
        prev = None
        for layer in self.layers():
            out_d, in_d = layer.weight.shape
            if layer.bias.shape != (out_d,):
                raise HeadError("bias shape does not match weight rows")
            if prev is not None and in_d != prev:
                raise HeadError("adjacent layer dimensions do not chain")
            if layer.activation not in ACTIVATIONS:
                raise HeadError(f"unknown activation {layer.activation!r}")
            prev = out_d
        if prev != 1:
            raise HeadError("final layer must map to a single logit")


@dataclass
class ScoreOutput:
    y_hat: float
    per_ref_scores: np.ndarray
    argmax_ref: int | None = None


def fuse(c: np.ndarray, r: np.ndarray, mode: str = "full") -> np.ndarray:
    """Fuse two equal-length vectors into the similarity feature block.

    full: [c; r; |c - r|; c * r] (length 4d)
    concat_only: [c; r] (length 2d)
    """
    c = np.asarray(c, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if c.shape != r.shape or c.ndim != 1:
        raise HeadError("fuse requires two vectors of equal dimension")
    if mode == "full":
        return np.concatenate([c, r, np.abs(c - r), c * r])
    if mode == "concat_only":
        return np.concatenate([c, r])
    raise HeadError(f"unknown fusion mode {mode!r}")


def build_h_inter(sample: EmbeddingSample, ref_index: int, config: HeadConfig) -> np.ndarray:
    """Fused feature vector for one reference of a sample.

    Enabled stream blocks are concatenated in fixed order: candidate/reference
    text (CLIP), candidate text/image (CLIP), candidate/reference text
    (RoBERTa). Disabled streams contribute nothing, so their input vectors
    cannot influence the result.
    """
    if not 0 <= ref_index < sample.n_refs:
        raise HeadError(f"ref_index {ref_index} out of range for {sample.n_refs} refs")
    mode = config.fusion_mode
    c_clip = np.asarray(sample.cand_clip, dtype=np.float64)
    blocks = []
    if config.use_clip_text:
        blocks.append(fuse(c_clip, sample.refs_clip[ref_index], mode))
    if config.use_image:
        blocks.append(fuse(c_clip, sample.img, mode))
    if config.use_roberta:
        blocks.append(fuse(sample.cand_rb, sample.refs_rb[ref_index], mode))
    return np.concatenate(blocks)


def init_params(config: HeadConfig, d_clip: int, d_rb: int) -> HeadParams:
    """Seeded parameter initialization.

    Weights are uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero.
    The draw order is fixed, so a seed fully determines every entry.
    """
    if d_clip < 1 or d_rb < 1:
        raise HeadError("embedding dimensions must be >= 1")
    rng = np.random.Generator(np.random.PCG64(config.seed))

    def make(dims: list[int], final_activation: str) -> list[Layer]:
        layers = []
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            if fan_in < 1 or fan_out < 1:
                raise HeadError("zero-dimension layer")
            bound = 1.0 / math.sqrt(fan_in)
            weight = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            act = "relu" if i < len(dims) - 2 else final_activation
            layers.append(Layer(weight, np.zeros(fan_out), act))
        return layers

    dim_in = config.h_inter_dim(d_clip, d_rb)
    mlp1 = make([dim_in, *config.mlp1_hidden, config.d_h], final_activation="relu")
    mlp2 = make([config.d_h, *config.mlp2_hidden, 1], final_activation="linear")
    params = HeadParams(mlp1, mlp2)
    params.validate_chain()
    return params


def _forward_vector(x: np.ndarray, params: HeadParams) -> float:
    a = x
    for layer in params.layers():
        a = layer.weight @ a + layer.bias
        if layer.activation == "relu":
            np.maximum(a, 0.0, out=a)
    return float(a[0])


def _aggregate(scores: np.ndarray, mode: str) -> tuple[float, int | None]:
    if mode == "max":
        k = int(np.argmax(scores))  # ties resolve to the lowest index
        return float(scores[k]), k
    return math.fsum(scores) / len(scores), None


def score(sample: EmbeddingSample, params: HeadParams, config: HeadConfig) -> ScoreOutput:
    """Score one sample: per-reference sigmoid scores and their aggregate."""
    expected = config.h_inter_dim(sample.d_clip, sample.d_rb)
    if params.input_dim() != expected:
        raise HeadError(
            f"params expect input dim {params.input_dim()}, sample/config give {expected}"
        )
    logits = np.array(
        [_forward_vector(build_h_inter(sample, i, config), params) for i in range(sample.n_refs)]
    )
    if not np.all(np.isfinite(logits)):
        raise HeadError(f"{sample.sample_id}: non-finite logit")
    per_ref = expit(logits)
    y_hat, argmax_ref = _aggregate(per_ref, config.aggregate)
    return ScoreOutput(y_hat=y_hat, per_ref_scores=per_ref, argmax_ref=argmax_ref)


# ---------------------------------------------------------------------------
# Batched scoring (the hot path)
# ---------------------------------------------------------------------------


@dataclass
class _Stacked:
    cand_clip: np.ndarray  # (B, d_clip)
    cand_rb: np.ndarray  # (B, d_rb)
    img: np.ndarray  # (B, d_clip)
    refs_clip: np.ndarray  # (R, d_clip)
    refs_rb: np.ndarray  # (R, d_rb)
    row_sample: np.ndarray  # (R,) int64, owning sample per reference row
    offsets: np.ndarray  # (B + 1,) int64


def _stack(samples: list[EmbeddingSample]) -> _Stacked:
    counts = np.array([s.n_refs for s in samples], dtype=np.int64)
    offsets = np.zeros(len(samples) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return _Stacked(
        cand_clip=np.ascontiguousarray([s.cand_clip for s in samples], dtype=np.float64),
        cand_rb=np.ascontiguousarray([s.cand_rb for s in samples], dtype=np.float64),
        img=np.ascontiguousarray([s.img for s in samples], dtype=np.float64),
        refs_clip=np.ascontiguousarray(np.vstack([s.refs_clip for s in samples]), dtype=np.float64),
        refs_rb=np.ascontiguousarray(np.vstack([s.refs_rb for s in samples]), dtype=np.float64),
        row_sample=np.repeat(np.arange(len(samples), dtype=np.int64), counts),
        offsets=offsets,
    )


def _shared_unique_split(config: HeadConfig, d_clip: int, d_rb: int) -> tuple[np.ndarray, np.ndarray]:
    """Column indices of h_inter that are constant per sample vs. per ref.

    The candidate blocks and the whole image block repeat across a sample's
    references; projecting them once per sample instead of once per reference
    removes roughly a third of the first-layer work.
    """
    f = config.fused_factor
    shared, uniq = [], []
    pos = 0
    if config.use_clip_text:
        shared.extend(range(pos, pos + d_clip))
        uniq.extend(range(pos + d_clip, pos + f * d_clip))
        pos += f * d_clip
    if config.use_image:
        shared.extend(range(pos, pos + f * d_clip))
        pos += f * d_clip
    if config.use_roberta:
        shared.extend(range(pos, pos + d_rb))
        uniq.extend(range(pos + d_rb, pos + f * d_rb))
        pos += f * d_rb
    return np.array(shared, dtype=np.intp), np.array(uniq, dtype=np.intp)


def _assemble_shared(st: _Stacked, config: HeadConfig) -> np.ndarray:
    """Per-sample constant columns, ordered to match _shared_unique_split."""
    full = config.fusion_mode == "full"
    parts = []
    if config.use_clip_text:
        parts.append(st.cand_clip)
    if config.use_image:
        parts.append(st.cand_clip)
        parts.append(st.img)
        if full:
            parts.append(np.abs(st.cand_clip - st.img))
            parts.append(st.cand_clip * st.img)
    if config.use_roberta:
        parts.append(st.cand_rb)
    return np.concatenate(parts, axis=1)


class PreparedScorer:
    """First-layer weights split into shared/per-reference column blocks."""

    def __init__(self, params: HeadParams, config: HeadConfig, d_clip: int, d_rb: int):
        expected = config.h_inter_dim(d_clip, d_rb)
        if params.input_dim() != expected:
            raise HeadError(
                f"params expect input dim {params.input_dim()}, config gives {expected}"
            )
        params.validate_chain()
        self.params = params
        self.config = config
        self.d_clip = d_clip
        self.d_rb = d_rb
        shared_idx, uniq_idx = _shared_unique_split(config, d_clip, d_rb)
        w1 = params.mlp1[0].weight
        self.w1_shared = np.ascontiguousarray(w1[:, shared_idx])
        self.w1_uniq = np.ascontiguousarray(w1[:, uniq_idx])
        self.b1 = params.mlp1[0].bias
        self.first_activation = params.mlp1[0].activation
        self.rest = params.mlp1[1:] + params.mlp2

    def logits(self, st: _Stacked) -> np.ndarray:
        shared = _assemble_shared(st, self.config) @ self.w1_shared.T
        uniq = kernels.assemble_unique(
            st.cand_clip,
            st.cand_rb,
            st.refs_clip,
            st.refs_rb,
            st.row_sample,
            self.config.use_clip_text,
            self.config.use_roberta,
            self.config.fusion_mode == "full",
        )
        a = uniq @ self.w1_uniq.T if uniq.shape[1] else np.zeros((len(st.row_sample), len(self.b1)))
        a += shared[st.row_sample]
        a += self.b1
        if self.first_activation == "relu":
            np.maximum(a, 0.0, out=a)
        for layer in self.rest:
            a = a @ layer.weight.T
            a += layer.bias
            if layer.activation == "relu":
                np.maximum(a, 0.0, out=a)
        return a[:, 0]


def score_samples(
    samples: list[EmbeddingSample],
    params: HeadParams,
    config: HeadConfig,
    chunk_size: int = 512,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized scoring of many samples.

    Returns (y_hat, argmax_ref); argmax_ref is -1 under mean aggregation.
    Chunking bounds the size of the assembled feature matrix.
    """
    if not samples:
        return np.empty(0), np.empty(0, dtype=np.int64)
    scorer = PreparedScorer(params, config, samples[0].d_clip, samples[0].d_rb)
    y_hat = np.empty(len(samples))
    argmax = np.full(len(samples), -1, dtype=np.int64)
    use_max = config.aggregate == "max"
    for lo in range(0, len(samples), chunk_size):
        chunk = samples[lo : lo + chunk_size]
        st = _stack(chunk)
        logits = scorer.logits(st)
        if not np.all(np.isfinite(logits)):
            raise HeadError("non-finite logit in batch")
        scores = expit(logits)
        for j in range(len(chunk)):
            seg = scores[st.offsets[j] : st.offsets[j + 1]]
            if use_max:
                k = int(np.argmax(seg))
                y_hat[lo + j] = seg[k]
                argmax[lo + j] = k
            else:
                y_hat[lo + j] = math.fsum(seg) / len(seg)
    return y_hat, argmax


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def batch_gradient(
    samples: list[EmbeddingSample],
    targets: np.ndarray,
    params: HeadParams,
    config: HeadConfig,
) -> tuple[float, list[np.ndarray]]:
    """Mean squared-error loss over a batch and its analytic gradient.

    The loss is mean((y_hat - y)^2); the gradient is the mean of per-sample
    gradients, returned as a flat array list aligned with params.arrays().
    Under max aggregation only the argmax reference's branch receives
    gradient; under mean every branch receives 1/N of it.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if len(samples) == 0:
        raise HeadError("empty batch")
    if targets.shape != (len(samples),):
        raise HeadError("one target per sample required")
    expected = config.h_inter_dim(samples[0].d_clip, samples[0].d_rb)
    if params.input_dim() != expected:
        raise HeadError(
            f"params expect input dim {params.input_dim()}, sample/config give {expected}"
        )

    st = _stack(samples)
    rows = kernels.assemble_rows(
        st.cand_clip,
        st.cand_rb,
        st.img,
        st.refs_clip,
        st.refs_rb,
        st.row_sample,
        config.use_clip_text,
        config.use_image,
        config.use_roberta,
        config.fusion_mode == "full",
    )

    layers = params.layers()
    inputs = []  # activation fed to each layer
    pre = []  # pre-activation output of each layer
    a = rows
    for layer in layers:
        inputs.append(a)
        z = a @ layer.weight.T
        z += layer.bias
        pre.append(z)
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
    logits = a[:, 0]
    if not np.all(np.isfinite(logits)):
        raise HeadError("non-finite logit in batch")
    scores = expit(logits)

    n = len(samples)
    y_hat = np.empty(n)
    weight_rows = np.zeros(len(scores))
    for j in range(n):
        lo, hi = st.offsets[j], st.offsets[j + 1]
        seg = scores[lo:hi]
        if config.aggregate == "max":
            k = int(np.argmax(seg))
            y_hat[j] = seg[k]
            weight_rows[lo + k] = 1.0
        else:
            y_hat[j] = math.fsum(seg) / len(seg)
            weight_rows[lo:hi] = 1.0 / len(seg)

    errors = y_hat - targets
    loss = math.fsum(e * e for e in errors) / n
    # d loss / d score_row, routed through the aggregation
    g = weight_rows * (2.0 / n) * errors[st.row_sample] * scores * (1.0 - scores)

    grads: list[np.ndarray] = []
    delta = g[:, None]  # gradient w.r.t. each layer's post-activation output
    for idx in range(len(layers) - 1, -1, -1):
        layer = layers[idx]
        if layer.activation == "relu":
            delta = delta * (pre[idx] > 0.0)
        grads.append(delta.sum(axis=0))  # bias
        grads.append(delta.T @ inputs[idx])  # weight
        if idx > 0:
            delta = delta @ layer.weight
    grads.reverse()
    for arr in grads:
        if not np.all(np.isfinite(arr)):
            raise HeadError("non-finite gradient")
    return loss, grads


def score_gradient(
    sample: EmbeddingSample,
    target_y: float,
    params: HeadParams,
    config: HeadConfig,
) -> tuple[float, list[np.ndarray]]:
    """Loss (y_hat - y)^2 for one sample and exact gradients for every array."""
    if not 0.0 <= target_y <= 1.0:
        raise HeadError("target must lie in [0, 1]")
    return batch_gradient([sample], np.array([target_y]), params, config)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str | os.PathLike,
    params: HeadParams,
    config: HeadConfig,
    d_clip: int,
    d_rb: int,
    meta: dict | None = None,
) -> None:
    """Write params + config to a checkpoint file, atomically.

    Layout: magic, u32 header length, JSON header (config echo, dims, layer
    shapes), then each layer's weight and bias as little-endian float64.
    Identical inputs produce byte-identical files.
    """
    header = {
        "config": config.to_dict(),
        "d_clip": d_clip,
        "d_rb": d_rb,
        "layers": [
            {"shape": list(l.weight.shape), "activation": l.activation, "mlp": mlp}
            for mlp, group in (("mlp1", params.mlp1), ("mlp2", params.mlp2))
            for l in group
        ],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for layer in params.layers():
            fh.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[HeadParams, HeadConfig, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _CKPT_MAGIC:
        raise HeadError("bad checkpoint magic")
    (hlen,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    config = HeadConfig.from_dict(header["config"])
    pos = 8 + hlen
    mlp1: list[Layer] = []
    mlp2: list[Layer] = []
    for layer_info in header["layers"]:
        out_d, in_d = layer_info["shape"]
        w_bytes = out_d * in_d * 8
        weight = np.frombuffer(data[pos : pos + w_bytes], dtype="<f8").reshape(out_d, in_d).copy()
        pos += w_bytes
        bias = np.frombuffer(data[pos : pos + out_d * 8], dtype="<f8").copy()
        pos += out_d * 8
        layer = Layer(weight, bias, layer_info["activation"])
        (mlp1 if layer_info["mlp"] == "mlp1" else mlp2).append(layer)
    if pos != len(data):
        raise HeadError("trailing data in checkpoint")
    params = HeadParams(mlp1, mlp2)
    params.validate_chain()
    meta = dict(header.get("meta", {}))
    meta["d_clip"] = header["d_clip"]
    meta["d_rb"] = header["d_rb"]
    return params, config, meta
