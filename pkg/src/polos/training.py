"""Mean-squared-error training with Adam and rank-correlation early stopping.

Each epoch shuffles with its own seeded stream, steps once per batch on the
batch-mean gradient, then measures Kendall's tau-c between predictions and
human scores on the validation split. Training stops when the best tau has
not improved for ``patience`` consecutive epochs, and the parameters from
the best epoch are returned. Runs are bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from polos.bundle import EmbeddingSample
from polos.evaluation import DegenerateStatisticError, tau_c
from polos.head import (
    HeadConfig,
    HeadError,
    HeadParams,
    batch_gradient,
    init_params,
    score_samples,
)


class TrainError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3.0e-5
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1.0e-8
    batch_size: int = 64
    patience: int = 5
    max_epochs: int = 100
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise TrainError("beta1 and beta2 must lie in (0, 1)")
        # zero is allowed so an epoch can be run in evaluation-only mode
        if self.learning_rate < 0.0:
            raise TrainError("learning_rate must not be negative")
        if self.epsilon <= 0.0:
            raise TrainError("epsilon must be positive")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise TrainError("batch_size, patience, max_epochs must be >= 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_arrays(cls, arrays: list[np.ndarray]) -> "AdamState":
        return cls(
            m=[np.zeros_like(a) for a in arrays],
            v=[np.zeros_like(a) for a in arrays],
            t=0,
        )

    def copy(self) -> "AdamState":
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v], self.t)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_tau: float | None
    wall_time_s: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_tau: float = -math.inf

    def to_jsonl(self, include_timing: bool = False) -> str:
        """One record per epoch. Timing is volatile across runs and is only
        emitted on request so identical seeds produce identical logs."""
        lines = []
        for r in self.epochs:
            rec = {"epoch": r.epoch, "train_loss": r.train_loss, "val_tau": r.val_tau}
            if include_timing:
                rec["wall_time_s"] = r.wall_time_s
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + "\n"


def adam_step(
    arrays: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Pure: inputs are not mutated."""
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise TrainError("parameter/gradient/state shape mismatch")
    b1, b2, lr, eps = config.beta1, config.beta2, config.learning_rate, config.epsilon
    t = state.t + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_m, new_v, new_arrays = [], [], []
    for theta, g, m, v in zip(arrays, grads, state.m, state.v):
        if theta.shape != g.shape:
            raise TrainError("gradient shape mismatch")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        # theta - lr * (m / c1) / (sqrt(v / c2) + eps), minimizing temporaries
        denom = v / c2
        np.sqrt(denom, out=denom)
        denom += eps
        update = m / c1
        update *= lr
        update /= denom
        if not np.all(np.isfinite(update)):
            raise TrainError("non-finite optimizer update")
        new_m.append(m)
        new_v.append(v)
        new_arrays.append(theta - update)
    return new_arrays, AdamState(new_m, new_v, t)


def _targets(samples: list[EmbeddingSample]) -> np.ndarray:
    out = np.empty(len(samples))
    for i, s in enumerate(samples):
        if s.score is None:
            raise TrainError(f"{s.sample_id}: missing score")
        out[i] = s.score
    return out


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch])))


def train_epoch(
    samples: list[EmbeddingSample],
    params: HeadParams,
    state: AdamState,
    config: TrainConfig,
    head_config: HeadConfig,
    epoch: int = 1,
) -> tuple[HeadParams, AdamState, float]:
    """One pass over the training set; returns the mean per-sample loss.

    Samples are shuffled by an epoch-specific stream and split into batches
    of ``batch_size`` (the last may be short). Losses are measured before
    each step, so with learning_rate effectively zero the returned loss is
    the plain evaluation loss.
    """
    if not samples:
        raise TrainError("empty training set")
    targets = _targets(samples)
    order = np.arange(len(samples))
    if config.shuffle:
        order = _epoch_rng(config.seed, epoch).permutation(len(samples))

    arrays = params.arrays()
    total = 0.0
    for lo in range(0, len(samples), config.batch_size):
        idx = order[lo : lo + config.batch_size]
        batch = [samples[i] for i in idx]
        loss, grads = batch_gradient(batch, targets[idx], params.with_arrays(arrays), head_config)
        arrays, state = adam_step(arrays, grads, state, config)
        total += loss * len(batch)
    return params.with_arrays(arrays), state, total / len(samples)


def _validation_tau(
    params: HeadParams,
    valid: list[EmbeddingSample],
    head_config: HeadConfig,
) -> float | None:
    human = _targets(valid)
    y_hat, _ = score_samples(valid, params, head_config)
    try:
        return float(tau_c(y_hat, human))
    except DegenerateStatisticError:
        return None  # constant predictions: treated as no improvement


def fit(
    train: list[EmbeddingSample],
    valid: list[EmbeddingSample],
    head_config: HeadConfig,
    train_config: TrainConfig,
    params: HeadParams | None = None,
    tau_fn=None,
    progress=None,
) -> tuple[HeadParams, TrainLog]:
    """Train until tau-c on the validation split stops improving.

    ``tau_fn(params, epoch) -> float`` overrides the validation statistic
    (used by tests to inject a fixed sequence). Returns the parameter
    snapshot from the epoch with the highest validation tau; ties keep the
    earliest epoch. Improvement means strictly greater.
    """
    if not train:
        raise TrainError("empty training set")
    if not valid:
        raise TrainError("empty validation set")
    _targets(train)
    if tau_fn is None:
        _targets(valid)
    if params is None:
        params = init_params(head_config, train[0].d_clip, train[0].d_rb)

    state = AdamState.for_arrays(params.arrays())
    log = TrainLog()
    best_params = params.copy()
    stale = 0
    for epoch in range(1, train_config.max_epochs + 1):
        started = time.perf_counter()
        params, state, loss = train_epoch(
            train, params, state, train_config, head_config, epoch=epoch
        )
        if tau_fn is not None:
            val_tau = float(tau_fn(params, epoch))
        else:
            val_tau = _validation_tau(params, valid, head_config)
        log.epochs.append(EpochRecord(epoch, loss, val_tau, time.perf_counter() - started))
        if progress is not None:
            progress(log.epochs[-1])
        if val_tau is not None and val_tau > log.best_tau:
            log.best_tau = val_tau
            log.best_epoch = epoch
            best_params = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= train_config.patience:
                break
    return best_params, log


# ---------------------------------------------------------------------------
# Flat key-value config files
# ---------------------------------------------------------------------------

_TRAIN_FIELDS = {f.name: f.type for f in fields(TrainConfig)}
_HEAD_FIELDS = {
    "aggregate": str,
    "fusion_mode": str,
    "use_image": bool,
    "use_clip_text": bool,
    "use_roberta": bool,
    "d_h": int,
    "mlp1_hidden": tuple,
    "mlp2_hidden": tuple,
    "activation": str,
    "seed": int,
}


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise TrainError(f"expected a boolean, got {raw!r}")


def _coerce(name: str, raw: str, kind) -> object:
    if kind in (bool, "bool"):
        return _parse_bool(raw)
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    if kind is tuple:
        return tuple(int(part) for part in raw.split(",") if part.strip())
    return raw


def parse_config_text(text: str) -> tuple[TrainConfig, HeadConfig]:
    """Parse `key = value` lines into the two config objects.

    The single ``seed`` key feeds both configs; unknown keys are rejected.
    """
    train_kwargs: dict = {}
    head_kwargs: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise TrainError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key == "seed":
            value = int(raw)
            train_kwargs["seed"] = value
            head_kwargs["seed"] = value
        elif key in _TRAIN_FIELDS:
            train_kwargs[key] = _coerce(key, raw, _TRAIN_FIELDS[key])
        elif key in _HEAD_FIELDS:
            head_kwargs[key] = _coerce(key, raw, _HEAD_FIELDS[key])
        else:
            raise TrainError(f"line {lineno}: unknown key {key!r}")
    try:
        return TrainConfig(**train_kwargs), HeadConfig(**head_kwargs)
    except HeadError as exc:
        raise TrainError(str(exc)) from exc


def load_config_file(path: str | os.PathLike) -> tuple[TrainConfig, HeadConfig]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def default_config_text() -> str:
    lines = ["# training"]
    for f in fields(TrainConfig):
        if f.name == "seed":
            continue
        lines.append(f"{f.name} = {getattr(TrainConfig(), f.name)}")
    lines.append("")
    lines.append("# head")
    head = HeadConfig()
    for name in _HEAD_FIELDS:
        if name == "seed":
            continue
        value = getattr(head, name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{name} = {value}")
    lines.append("")
    lines.append("seed = 0")
    return "\n".join(lines) + "\n"
