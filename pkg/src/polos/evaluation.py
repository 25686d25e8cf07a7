"""Benchmark protocols: rank correlation, pairwise preference, hallucination.

Kendall's tau-b and tau-c are computed from exact pair counts obtained in
O(n log n) (sort plus inversion counting); the pairwise protocols score
caption pairs with the head and compare strict score order against ground
truth, counting ties as incorrect.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from polos import kernels
from polos.bundle import BundleError, EmbeddingSample
from polos.head import HeadConfig, HeadParams, score_samples

PASCAL_CATEGORIES = ("HC", "HI", "HM", "MM")
SCHEMA_VERSION = 1


class DegenerateStatisticError(ValueError):
    """The rank statistic is undefined for this input (all-tied axis)."""


@dataclass(frozen=True)
class ScoredPair:
    metric_score: float
    human_score: float


@dataclass
class PascalPair:
    """One pairwise preference item: two candidate captions, a shared
    reference pool, and the majority-vote winner."""

    image_id: str
    img: np.ndarray
    a_clip: np.ndarray
    a_rb: np.ndarray
    b_clip: np.ndarray
    b_rb: np.ndarray
    pool_clip: np.ndarray  # (M, d_clip)
    pool_rb: np.ndarray  # (M, d_rb)
    category: str
    winner: str  # "A" or "B"

    def __post_init__(self):
        if self.category not in PASCAL_CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.winner not in ("A", "B"):
            raise ValueError("winner must be 'A' or 'B'")
        if self.pool_clip.shape[0] < 1:
            raise ValueError("empty reference pool")


@dataclass
class FoilPair:
    """A true caption and its minimally corrupted twin for one image."""

    image_id: str
    img: np.ndarray
    true_clip: np.ndarray
    true_rb: np.ndarray
    foil_clip: np.ndarray
    foil_rb: np.ndarray
    refs_clip: np.ndarray
    refs_rb: np.ndarray

    def __post_init__(self):
        if self.refs_clip.shape[0] not in (1, 4):
            raise ValueError("reference count must be 1 or 4")

    @property
    def setting(self) -> str:
        return f"{self.refs_clip.shape[0]}-ref"


@dataclass
class EvalReport:
    dataset: str
    statistic: str
    value: float
    sample_count: int
    seed: int | None = None
    config: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "dataset": self.dataset,
            "statistic": self.statistic,
            "value": self.value,
            "sample_count": self.sample_count,
            "seed": self.seed,
            "config": self.config,
        }
        out.update(self.extras)
        return out


# ---------------------------------------------------------------------------
# Kendall rank correlation
# ---------------------------------------------------------------------------


def _tie_pairs(sorted_vals: np.ndarray) -> int:
    """Sum over tie groups of t * (t - 1) / 2 on a sorted array."""
    _, counts = np.unique(sorted_vals, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def _pair_counts(x: np.ndarray, y: np.ndarray) -> tuple[int, int, int]:
    """Return (C - D, ties_x, ties_y) over all unordered index pairs.

    C and D are the concordant/discordant counts. Discordant pairs are the
    inversions of y once the data is sorted by (x, then y); tie pair counts
    include jointly tied pairs.
    """
    n = len(x)
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    total = n * (n - 1) // 2
    ties_x = _tie_pairs(xs)
    ties_y = _tie_pairs(np.sort(y))
    joint = _tie_pairs(xs + 1j * ys)  # pairs tied on both axes
    discordant = kernels.count_inversions(ys)
    c_minus_d = total - ties_x - ties_y + joint - 2 * discordant
    return c_minus_d, ties_x, ties_y


def _validated_xy(pairs) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray([p.metric_score for p in pairs], dtype=np.float64)
    y = np.asarray([p.human_score for p in pairs], dtype=np.float64)
    return x, y


def tau_b(x, y) -> float:
    """Kendall's tau-b: (C - D) / sqrt((C + D + Tx) (C + D + Ty)).

    Tx (Ty) counts pairs tied only in x (only in y); jointly tied pairs are
    excluded from both, which makes each factor total - ties_on_other_axis.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if n != len(y):
        raise ValueError("input lengths differ")
    if n < 2:
        raise DegenerateStatisticError("need at least 2 pairs")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite score")
    total = n * (n - 1) // 2
    c_minus_d, ties_x, ties_y = _pair_counts(x, y)
    if ties_x == total or ties_y == total:
        raise DegenerateStatisticError("all values tied on one axis")
    return c_minus_d / math.sqrt((total - ties_x) * (total - ties_y))


def tau_c(x, y) -> float:
    """Kendall's tau-c: 2 m (C - D) / (n^2 (m - 1)), m = min distinct counts."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if n != len(y):
        raise ValueError("input lengths differ")
    if n < 2:
        raise DegenerateStatisticError("need at least 2 pairs")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite score")
    m = min(len(np.unique(x)), len(np.unique(y)))
    if m < 2:
        raise DegenerateStatisticError("fewer than 2 distinct values on one axis")
    c_minus_d, _, _ = _pair_counts(x, y)
    return 2.0 * m * c_minus_d / (n * n * (m - 1))


def kendall_tau_b(pairs) -> float:
    x, y = _validated_xy(pairs)
    return tau_b(x, y)


def kendall_tau_c(pairs) -> float:
    x, y = _validated_xy(pairs)
    return tau_c(x, y)


# ---------------------------------------------------------------------------
# Pairwise preference (reference-pool subsampling)
# ---------------------------------------------------------------------------


def _pair_stream_seed(base_seed: int, repeat: int, pair: PascalPair) -> np.random.SeedSequence:
    """Reference draws depend on the pair's content, not its list position,
    so permuting the input order cannot change any per-pair result."""
    digest = hashlib.sha256()
    digest.update(pair.image_id.encode("utf-8"))
    digest.update(pair.category.encode("utf-8"))
    digest.update(np.ascontiguousarray(pair.a_clip, dtype="<f8").tobytes())
    digest.update(np.ascontiguousarray(pair.b_clip, dtype="<f8").tobytes())
    key = int.from_bytes(digest.digest()[:8], "little")
    return np.random.SeedSequence([base_seed, repeat, key])


def _as_sample(sid, cand_clip, cand_rb, refs_clip, refs_rb, img) -> EmbeddingSample:
    return EmbeddingSample(
        sample_id=sid,
        cand_clip=np.asarray(cand_clip, dtype=np.float32),
        cand_rb=np.asarray(cand_rb, dtype=np.float32),
        refs_clip=np.asarray(refs_clip, dtype=np.float32),
        refs_rb=np.asarray(refs_rb, dtype=np.float32),
        img=np.asarray(img, dtype=np.float32),
    )


def pascal_accuracy(
    pairs: list[PascalPair],
    params: HeadParams,
    config: HeadConfig,
    n_refs_drawn: int = 5,
    seed: int = 0,
    repeats: int = 1,
) -> tuple[dict[str, float], float]:
    """Per-category pairwise accuracy plus their unweighted mean.

    For every pair, n_refs_drawn references are drawn without replacement
    from its pool; both captions are scored against the drawn set and the
    higher score wins. An exact tie counts as incorrect. With repeats > 1
    the accuracies are averaged over independent draw rounds.
    """
    if not pairs:
        raise ValueError("no pairs")
    for p in pairs:
        if p.pool_clip.shape[0] < n_refs_drawn:
            raise ValueError(
                f"{p.image_id}: pool of {p.pool_clip.shape[0]} refs, need {n_refs_drawn}"
            )
    per_round: list[dict[str, float]] = []
    for rep in range(repeats):
        hits: dict[str, list[bool]] = {c: [] for c in PASCAL_CATEGORIES}
        batch: list[EmbeddingSample] = []
        for p in pairs:
            rng = np.random.Generator(np.random.PCG64(_pair_stream_seed(seed, rep, p)))
            idx = rng.choice(p.pool_clip.shape[0], size=n_refs_drawn, replace=False)
            refs_clip, refs_rb = p.pool_clip[idx], p.pool_rb[idx]
            batch.append(_as_sample("a", p.a_clip, p.a_rb, refs_clip, refs_rb, p.img))
            batch.append(_as_sample("b", p.b_clip, p.b_rb, refs_clip, refs_rb, p.img))
        y_hat, _ = score_samples(batch, params, config)
        for i, p in enumerate(pairs):
            score_a, score_b = y_hat[2 * i], y_hat[2 * i + 1]
            if score_a == score_b:
                predicted = None  # tie: counted incorrect
            else:
                predicted = "A" if score_a > score_b else "B"
            hits[p.category].append(predicted == p.winner)
        per_round.append(
            {c: float(np.mean(v)) for c, v in hits.items() if v}
        )
    categories = sorted({c for r in per_round for c in r})
    accuracy = {c: float(np.mean([r[c] for r in per_round])) for c in categories}
    mean = float(np.mean([accuracy[c] for c in categories]))
    return accuracy, mean


# ---------------------------------------------------------------------------
# Hallucination detection
# ---------------------------------------------------------------------------


def foil_accuracy(
    pairs: list[FoilPair],
    params: HeadParams,
    config: HeadConfig,
) -> dict[str, float]:
    """Fraction of pairs whose true caption strictly outscores the foil,
    reported per reference setting ("1-ref" / "4-ref")."""
    if not pairs:
        raise ValueError("no pairs")
    batch: list[EmbeddingSample] = []
    for p in pairs:
        batch.append(_as_sample("t", p.true_clip, p.true_rb, p.refs_clip, p.refs_rb, p.img))
        batch.append(_as_sample("f", p.foil_clip, p.foil_rb, p.refs_clip, p.refs_rb, p.img))
    y_hat, _ = score_samples(batch, params, config)
    correct: dict[str, list[bool]] = {}
    for i, p in enumerate(pairs):
        correct.setdefault(p.setting, []).append(bool(y_hat[2 * i] > y_hat[2 * i + 1]))
    return {setting: float(np.mean(v)) for setting, v in sorted(correct.items())}


# ---------------------------------------------------------------------------
# Correlation report
# ---------------------------------------------------------------------------


def correlation_report(
    samples: list[EmbeddingSample],
    params: HeadParams,
    config: HeadConfig,
    statistic: str = "tau_c",
    dataset_tag: str = "",
    seed: int | None = None,
) -> EvalReport:
    """Score a bundle and correlate predictions with its human scores."""
    if statistic not in ("tau_b", "tau_c"):
        raise ValueError("statistic must be tau_b or tau_c")
    if not samples:
        raise ValueError("empty bundle")
    human = []
    for s in samples:
        if s.score is None:
            raise BundleError(f"{s.sample_id}: missing human score")
        human.append(s.score)
    y_hat, _ = score_samples(samples, params, config)
    value = tau_b(y_hat, human) if statistic == "tau_b" else tau_c(y_hat, human)
    return EvalReport(
        dataset=dataset_tag,
        statistic=statistic,
        value=float(value),
        sample_count=len(samples),
        seed=seed,
        config=config.to_dict(),
    )


# ---------------------------------------------------------------------------
# Protocol manifests
# ---------------------------------------------------------------------------


def read_protocol_manifest(path) -> list[dict]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries


def _index(samples: list[EmbeddingSample]) -> dict[str, EmbeddingSample]:
    return {s.sample_id: s for s in samples}


def load_pascal_pairs(samples: list[EmbeddingSample], entries: list[dict]) -> list[PascalPair]:
    """Join a pairwise-preference manifest against bundle samples.

    Each entry names two candidate sample ids; the reference pool and image
    vector are taken from sample ``a`` (both captions are judged against the
    same references).
    """
    by_id = _index(samples)
    pairs = []
    for e in entries:
        if e.get("kind", "pascal") != "pascal":
            continue
        a, b = by_id[e["a"]], by_id[e["b"]]
        pairs.append(
            PascalPair(
                image_id=e["image_id"],
                img=a.img,
                a_clip=a.cand_clip,
                a_rb=a.cand_rb,
                b_clip=b.cand_clip,
                b_rb=b.cand_rb,
                pool_clip=a.refs_clip,
                pool_rb=a.refs_rb,
                category=e["category"],
                winner=e["winner"],
            )
        )
    return pairs


def load_foil_pairs(samples: list[EmbeddingSample], entries: list[dict]) -> list[FoilPair]:
    """Join a hallucination manifest (true/foil sample ids) against a bundle."""
    by_id = _index(samples)
    pairs = []
    for e in entries:
        if e.get("kind", "foil") != "foil":
            continue
        true, foil = by_id[e["true"]], by_id[e["foil"]]
        pairs.append(
            FoilPair(
                image_id=e["image_id"],
                img=true.img,
                true_clip=true.cand_clip,
                true_rb=true.cand_rb,
                foil_clip=foil.cand_clip,
                foil_rb=foil.cand_rb,
                refs_clip=true.refs_clip,
                refs_rb=true.refs_rb,
            )
        )
    return pairs
