"""Raw five-point human judgments: QC filtering, normalization, aggregation.

Evaluators showing suspicious behavior (implausibly fast responses, long
constant-rating runs, no rating diversity over many judgments) are dropped
wholesale with the triggering rule recorded, ratings are min-max normalized
onto [0, 1], and per-caption scores are the mean over surviving evaluators.
"""

from __future__ import annotations

import json
import math
import os
import statistics
from dataclasses import dataclass

import numpy as np

from polos.bundle import SPLIT_NAMES, DatasetSplit

RATING_SCALE = (1, 2, 3, 4, 5)


class JudgmentError(ValueError):
    pass


@dataclass(frozen=True)
class JudgmentRecord:
    sample_id: str
    evaluator_id: str
    rating: int
    response_time: float | None = None

    def __post_init__(self):
        if self.rating not in RATING_SCALE:
            raise JudgmentError(f"rating {self.rating!r} outside the 1..5 scale")
        if self.response_time is not None and self.response_time < 0:
            raise JudgmentError("negative response time")


@dataclass
class EvaluatorProfile:
    evaluator_id: str
    judgment_count: int
    median_response_time: float | None
    distinct_ratings: int
    max_constant_run: int
    exclusion_reason: str | None = None


@dataclass(frozen=True)
class QCThresholds:
    min_median_response_time: float = 2.0
    max_constant_run: int = 20
    min_distinct_ratings: int = 2

    def __post_init__(self):
        if self.min_median_response_time <= 0 or self.max_constant_run <= 0:
            raise JudgmentError("thresholds must be positive")
        if self.min_distinct_ratings < 1:
            raise JudgmentError("min_distinct_ratings must be >= 1")


@dataclass
class AggregatedScore:
    sample_id: str
    score: float
    evaluator_count: int


def normalize_rating(rating: int) -> float:
    """Min-max map of the 1..5 scale onto [0, 1]: (rating - 1) / 4."""
    if rating not in RATING_SCALE:
        raise JudgmentError(f"rating {rating!r} outside the 1..5 scale")
    return (rating - 1) / 4.0


def _profile(evaluator_id: str, records: list[JudgmentRecord]) -> EvaluatorProfile:
    times = [r.response_time for r in records if r.response_time is not None]
    run = best_run = 1
    for prev, cur in zip(records, records[1:]):
        run = run + 1 if cur.rating == prev.rating else 1
        best_run = max(best_run, run)
    return EvaluatorProfile(
        evaluator_id=evaluator_id,
        judgment_count=len(records),
        median_response_time=statistics.median(times) if times else None,
        distinct_ratings=len({r.rating for r in records}),
        max_constant_run=best_run,
    )


def filter_evaluators(
    records: list[JudgmentRecord],
    thresholds: QCThresholds = QCThresholds(),
) -> tuple[list[JudgmentRecord], list[EvaluatorProfile]]:
    """Drop every record of an evaluator matching an exclusion rule.

    Rules, in precedence order: median response time below the floor
    ("response time"), any constant-rating run reaching the cap ("constant
    ratings"), and fewer distinct ratings than required once the evaluator
    has at least 10 judgments ("low rating diversity"). Kept evaluators'
    records pass through unchanged, in their original order.
    """
    grouped: dict[str, list[JudgmentRecord]] = {}
    for r in records:
        grouped.setdefault(r.evaluator_id, []).append(r)

    excluded: dict[str, EvaluatorProfile] = {}
    for evaluator_id, recs in grouped.items():
        prof = _profile(evaluator_id, recs)
        if (
            prof.median_response_time is not None
            and prof.median_response_time < thresholds.min_median_response_time
        ):
            prof.exclusion_reason = "response time"
        elif prof.max_constant_run >= thresholds.max_constant_run:
            prof.exclusion_reason = "constant ratings"
        elif (
            prof.judgment_count >= 10
            and prof.distinct_ratings < thresholds.min_distinct_ratings
        ):
            prof.exclusion_reason = "low rating diversity"
        if prof.exclusion_reason is not None:
            excluded[evaluator_id] = prof

    kept = [r for r in records if r.evaluator_id not in excluded]
    return kept, sorted(excluded.values(), key=lambda p: p.evaluator_id)


def aggregate_scores(
    records: list[JudgmentRecord],
    method: str = "mean",
    expected_ids: list[str] | None = None,
) -> tuple[list[AggregatedScore], list[str]]:
    """Per-sample score from normalized ratings, plus ids left with no records.

    The mean is the exact (fsum) average, so record order cannot change it.
    ``expected_ids`` lets callers learn which samples lost all their
    judgments to filtering instead of having them vanish silently.
    """
    if method not in ("mean", "median"):
        raise JudgmentError("method must be mean or median")
    grouped: dict[str, list[float]] = {}
    for r in records:
        grouped.setdefault(r.sample_id, []).append(normalize_rating(r.rating))
    out = []
    for sample_id in sorted(grouped):
        values = grouped[sample_id]
        if method == "mean":
            value = math.fsum(values) / len(values)
        else:
            value = statistics.median(values)
        out.append(AggregatedScore(sample_id, value, len(values)))
    missing = sorted(set(expected_ids or []) - set(grouped))
    return out, missing


def make_splits(
    sample_ids: list[str],
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    assignment: dict[str, list[str]] | None = None,
) -> dict[str, DatasetSplit]:
    """Partition ids into train/valid/test, by seeded shuffle or explicitly.

    With ``assignment`` (split name -> ids) the mapping must cover every id
    exactly once; otherwise ids are shuffled and cut at the rounded ratios.
    """
    if len(set(sample_ids)) != len(sample_ids):
        raise JudgmentError("duplicate sample ids")

    if assignment is not None:
        seen: dict[str, str] = {}
        for name, ids in assignment.items():
            if name not in SPLIT_NAMES:
                raise JudgmentError(f"unknown split name {name!r}")
            for sid in ids:
                if sid in seen:
                    raise JudgmentError(f"{sid!r} assigned to both {seen[sid]!r} and {name!r}")
                seen[sid] = name
        universe = set(sample_ids)
        if set(seen) != universe:
            off = set(seen) ^ universe
            raise JudgmentError(f"assignment does not cover ids exactly: {sorted(off)[:5]}")
        return {
            name: DatasetSplit(name, list(assignment.get(name, []))) for name in SPLIT_NAMES
        }

    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise JudgmentError("ratios must be three non-negative values summing to 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = [sample_ids[i] for i in rng.permutation(len(sample_ids))]
    n = len(order)
    n_train = round(ratios[0] * n)
    n_valid = round(ratios[1] * n)
    n_valid = min(n_valid, n - n_train)
    return {
        "train": DatasetSplit("train", order[:n_train]),
        "valid": DatasetSplit("valid", order[n_train : n_train + n_valid]),
        "test": DatasetSplit("test", order[n_train + n_valid :]),
    }


def score_distribution(scores) -> tuple[np.ndarray, dict]:
    """Histogram over ten equal bins of [0, 1] plus summary statistics.

    The final bin includes 1.0, so the counts always sum to the input size.
    """
    values = np.asarray(list(scores), dtype=np.float64)
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise JudgmentError("scores must lie in [0, 1]")
    counts, _ = np.histogram(values, bins=np.linspace(0.0, 1.0, 11))
    summary = {
        "count": int(values.size),
        "mean": float(values.mean()) if values.size else None,
        "std": float(values.std()) if values.size else None,
        "min": float(values.min()) if values.size else None,
        "max": float(values.max()) if values.size else None,
    }
    return counts, summary


# ---------------------------------------------------------------------------
# JSONL I/O
# ---------------------------------------------------------------------------


def read_judgments(path: str | os.PathLike) -> list[JudgmentRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(
                JudgmentRecord(
                    sample_id=obj["sample_id"],
                    evaluator_id=obj["evaluator_id"],
                    rating=int(obj["rating"]),
                    response_time=obj.get("response_time"),
                )
            )
    return records


def write_aggregated(path: str | os.PathLike, scores: list[AggregatedScore]) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for s in scores:
            fh.write(
                json.dumps(
                    {
                        "sample_id": s.sample_id,
                        "score": s.score,
                        "evaluator_count": s.evaluator_count,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    os.replace(tmp, path)
