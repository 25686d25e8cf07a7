"""Independent oracles and synthetic dataset builders shared by the tests.

The oracles deliberately avoid the library's computation paths: rank
statistics come from explicit classification of every index pair, and
gradients come from central finite differences of the forward loss.
"""

from __future__ import annotations

import math

import numpy as np

from polos import EmbeddingSample, HeadConfig


# ---------------------------------------------------------------------------
# Brute-force rank correlation oracle
# ---------------------------------------------------------------------------


def pair_counts_oracle(x, y) -> tuple[int, int, int, int, int]:
    """Classify all n(n-1)/2 unordered pairs: (C, D, Tx, Ty, Txy).

    Tx/Ty count pairs tied only on that axis; Txy pairs tied on both.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    i, j = np.triu_indices(len(x), k=1)
    dx = np.sign(x[i] - x[j])
    dy = np.sign(y[i] - y[j])
    concordant = int(np.sum(dx * dy > 0))
    discordant = int(np.sum(dx * dy < 0))
    tie_x = int(np.sum((dx == 0) & (dy != 0)))
    tie_y = int(np.sum((dx != 0) & (dy == 0)))
    tie_both = int(np.sum((dx == 0) & (dy == 0)))
    return concordant, discordant, tie_x, tie_y, tie_both


def tau_b_oracle(x, y) -> float:
    c, d, tx, ty, _ = pair_counts_oracle(x, y)
    return (c - d) / math.sqrt((c + d + tx) * (c + d + ty))


def tau_c_oracle(x, y) -> float:
    c, d, *_ = pair_counts_oracle(x, y)
    n = len(x)
    m = min(len(np.unique(x)), len(np.unique(y)))
    return 2.0 * m * (c - d) / (n * n * (m - 1))


def random_tied_dataset(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random scores with a random amount of tying on each axis."""
    n = int(rng.integers(2, 201))
    while True:
        if rng.random() < 0.5:
            x = rng.integers(0, int(rng.integers(2, 12)), size=n).astype(np.float64)
        else:
            x = rng.standard_normal(n)
        if rng.random() < 0.5:
            y = rng.integers(0, int(rng.integers(2, 12)), size=n).astype(np.float64)
        else:
            y = rng.standard_normal(n)
        if len(np.unique(x)) >= 2 and len(np.unique(y)) >= 2:
            return x, y


# ---------------------------------------------------------------------------
# Finite-difference gradient oracle
# ---------------------------------------------------------------------------


def finite_difference_grads(loss_fn, arrays: list[np.ndarray], step: float = 1e-5):
    """Central differences of loss_fn() w.r.t. every entry of every array.

    loss_fn reads the arrays in place, so entries are perturbed and restored.
    """
    grads = []
    for arr in arrays:
        grad = np.zeros_like(arr)
        flat, gflat = arr.ravel(), grad.ravel()
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = loss_fn()
            flat[k] = orig - step
            down = loss_fn()
            flat[k] = orig
            gflat[k] = (up - down) / (2.0 * step)
        grads.append(grad)
    return grads


def assert_grads_close(analytic, numeric, rel_tol=1e-4, floor=1e-6):
    """Relative comparison with an absolute floor for near-zero entries."""
    for a, f in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
        worst = np.max(np.abs(a - f) / denom)
        assert worst <= rel_tol, f"gradient mismatch: rel err {worst:.3e}"


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def small_config(**overrides) -> HeadConfig:
    base = dict(d_h=4, mlp1_hidden=(6,), mlp2_hidden=(3,), seed=0)
    base.update(overrides)
    return HeadConfig(**base)


def generic_params(config: HeadConfig, d_clip: int, d_rb: int, seed: int):
    """Random parameters in generic position for derivative checks.

    Fresh initialization has all-zero biases, which can leave whole relu
    chains sitting exactly on their kink (pre-activation 0.0), where central
    differences straddle the corner. Randomizing the biases makes that a
    measure-zero event.
    """
    from polos import init_params

    params = init_params(dataclasses_replace_seed(config, seed), d_clip, d_rb)
    rng = np.random.Generator(np.random.PCG64(seed + 7919))
    for layer in params.layers():
        layer.bias[:] = rng.uniform(-0.3, 0.3, size=layer.bias.shape)
        layer.weight *= rng.uniform(0.5, 1.5)
    return params


def dataclasses_replace_seed(config: HeadConfig, seed: int) -> HeadConfig:
    import dataclasses

    return dataclasses.replace(config, seed=seed)


def make_sample(rng, d_clip, d_rb, n_refs, sid="s0", score=None, scale=1.0) -> EmbeddingSample:
    return EmbeddingSample(
        sample_id=sid,
        cand_clip=(scale * rng.standard_normal(d_clip)).astype(np.float32),
        cand_rb=(scale * rng.standard_normal(d_rb)).astype(np.float32),
        refs_clip=(scale * rng.standard_normal((n_refs, d_clip))).astype(np.float32),
        refs_rb=(scale * rng.standard_normal((n_refs, d_rb))).astype(np.float32),
        img=(scale * rng.standard_normal(d_clip)).astype(np.float32),
        score=score,
    )


def aligned_sample(rng, d_clip, d_rb, n_refs, sid, aligned: bool, score=None,
                   direction=None) -> EmbeddingSample:
    """Candidate either aligned or anti-aligned with all of its references.

    The elementwise candidate*reference product is positive for aligned
    samples and negative otherwise, which a trained head separates cleanly
    for any subset of the references.
    """
    if direction is None:
        direction = (rng.standard_normal(d_clip), rng.standard_normal(d_rb))
    u_clip, u_rb = direction
    sgn = 1.0 if aligned else -1.0
    noise = 0.05
    return EmbeddingSample(
        sample_id=sid,
        cand_clip=(sgn * u_clip + noise * rng.standard_normal(d_clip)).astype(np.float32),
        cand_rb=(sgn * u_rb + noise * rng.standard_normal(d_rb)).astype(np.float32),
        refs_clip=(u_clip + noise * rng.standard_normal((n_refs, d_clip))).astype(np.float32),
        refs_rb=(u_rb + noise * rng.standard_normal((n_refs, d_rb))).astype(np.float32),
        img=rng.standard_normal(d_clip).astype(np.float32),
        score=score,
    )


def separable_training_set(rng, d_clip, d_rb, n_each=12, n_refs=3):
    """Aligned samples scored high, anti-aligned low."""
    samples = []
    for i in range(n_each):
        samples.append(
            aligned_sample(rng, d_clip, d_rb, n_refs, f"pos{i}", True, score=0.9)
        )
        samples.append(
            aligned_sample(rng, d_clip, d_rb, n_refs, f"neg{i}", False, score=0.1)
        )
    return samples
