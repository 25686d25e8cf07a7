import math

import numpy as np
import pytest

from polos import (
    AdamState,
    TrainConfig,
    adam_step,
    fit,
    init_params,
    score_samples,
    synth_samples,
    tau_c,
    train_epoch,
)
from polos.training import (
    TrainError,
    default_config_text,
    parse_config_text,
)

from helpers import small_config


def _scalar_state():
    arrays = [np.array([0.0])]
    return arrays, AdamState.for_arrays(arrays)


def test_adam_zero_gradient_leaves_params():
    arrays, state = _scalar_state()
    new, state = adam_step(arrays, [np.array([0.0])], state, TrainConfig())
    assert new[0][0] == 0.0
    assert state.t == 1


def test_adam_first_step_hand_value():
    # theta=0, g=1, lr=0.1: m_hat = v_hat = 1, theta' = -0.1 / (1 + eps)
    cfg = TrainConfig(learning_rate=0.1)
    arrays, state = _scalar_state()
    new, state = adam_step(arrays, [np.array([1.0])], state, cfg)
    expected = -0.1 * 1.0 / (math.sqrt(1.0) + cfg.epsilon)
    assert new[0][0] == pytest.approx(expected, rel=1e-15)
    assert new[0][0] == pytest.approx(-0.1, abs=1e-8)


def test_adam_determinism():
    cfg = TrainConfig()
    rng = np.random.default_rng(40)
    arrays = [rng.standard_normal((3, 4)), rng.standard_normal(3)]
    grads = [rng.standard_normal((3, 4)), rng.standard_normal(3)]
    s1 = AdamState.for_arrays(arrays)
    s2 = AdamState.for_arrays(arrays)
    a1, s1 = adam_step(arrays, grads, s1, cfg)
    a2, s2 = adam_step(arrays, grads, s2, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a1, a2))
    assert all(np.array_equal(x, y) for x, y in zip(s1.m, s2.m))
    assert s1.t == s2.t == 1


def test_adam_second_step_matches_formula():
    cfg = TrainConfig(learning_rate=0.01)
    arrays, state = _scalar_state()
    g1, g2 = 0.5, -0.2
    new, state = adam_step(arrays, [np.array([g1])], state, cfg)
    new, state = adam_step(new, [np.array([g2])], state, cfg)
    b1, b2 = cfg.beta1, cfg.beta2
    m = (1 - b1) * g1
    v = (1 - b2) * g1 * g1
    theta = -cfg.learning_rate * (m / (1 - b1)) / (math.sqrt(v / (1 - b2)) + cfg.epsilon)
    m = b1 * m + (1 - b1) * g2
    v = b2 * v + (1 - b2) * g2 * g2
    theta -= cfg.learning_rate * (m / (1 - b1**2)) / (math.sqrt(v / (1 - b2**2)) + cfg.epsilon)
    assert new[0][0] == pytest.approx(theta, rel=1e-14)
    assert state.t == 2


def test_adam_shape_mismatch():
    arrays, state = _scalar_state()
    with pytest.raises(TrainError):
        adam_step(arrays, [np.zeros(2)], state, TrainConfig())


def _tiny_setup(n=12, seed=41):
    samples = synth_samples(n, d_clip=4, d_rb=6, n_refs=2, seed=seed)
    cfg = small_config(seed=seed)
    params = init_params(cfg, 4, 6)
    return samples, cfg, params


def test_zero_learning_rate_epoch_is_evaluation_only():
    samples, head_cfg, params = _tiny_setup()
    tc = TrainConfig(learning_rate=0.0, seed=1)
    state = AdamState.for_arrays(params.arrays())
    new_params, _, loss = train_epoch(samples, params, state, tc, head_cfg)
    assert all(np.array_equal(a, b) for a, b in zip(params.arrays(), new_params.arrays()))
    y, _ = score_samples(samples, params, head_cfg)
    targets = np.array([s.score for s in samples])
    assert loss == pytest.approx(float(np.mean((y - targets) ** 2)), rel=1e-12)


def test_epoch_determinism():
    samples, head_cfg, params = _tiny_setup()
    tc = TrainConfig(seed=9, batch_size=5)
    out = []
    for _ in range(2):
        state = AdamState.for_arrays(params.arrays())
        p, s, loss = train_epoch(samples, params.copy(), state, tc, head_cfg, epoch=3)
        out.append((p, loss))
    assert out[0][1] == out[1][1]
    assert all(np.array_equal(a, b) for a, b in zip(out[0][0].arrays(), out[1][0].arrays()))


def test_epoch_requires_scores():
    samples, head_cfg, params = _tiny_setup()
    samples[3].score = None
    state = AdamState.for_arrays(params.arrays())
    with pytest.raises(TrainError, match="missing score"):
        train_epoch(samples, params, state, TrainConfig(), head_cfg)


def test_batch_loss_invariant_under_within_batch_permutation():
    samples, head_cfg, params = _tiny_setup(n=8)
    tc = TrainConfig(learning_rate=0.0, shuffle=False, batch_size=8, seed=0)
    state = AdamState.for_arrays(params.arrays())
    _, _, loss = train_epoch(samples, params, state, tc, head_cfg)
    rng = np.random.default_rng(0)
    permuted = [samples[i] for i in rng.permutation(8)]
    state = AdamState.for_arrays(params.arrays())
    _, _, loss_permuted = train_epoch(permuted, params, state, tc, head_cfg)
    assert loss == loss_permuted  # fsum-based reduction is order-exact


def test_overfit_small_synthetic_set():
    # a tiny head must memorize a handful of points quickly at a raised rate
    samples = synth_samples(6, d_clip=4, d_rb=6, n_refs=2, seed=44)
    for i, s in enumerate(samples):
        s.score = 0.2 + 0.6 * i / 5
    head_cfg = small_config(d_h=16, mlp1_hidden=(32,), mlp2_hidden=(8,), seed=44)
    params = init_params(head_cfg, 4, 6)
    tc = TrainConfig(learning_rate=5e-3, seed=44)
    state = AdamState.for_arrays(params.arrays())
    loss = None
    for epoch in range(1, 301):
        params, state, loss = train_epoch(samples, params, state, tc, head_cfg, epoch=epoch)
        if loss < 1e-5:
            break
    assert loss < 1e-5
    y, _ = score_samples(samples, params, head_cfg)
    assert tau_c(y, [s.score for s in samples]) == 1.0


def test_fit_early_stopping_trace():
    # injected validation sequence 0.2, 0.3, 0.3, ... with patience 5:
    # stop after epoch 7 and return the epoch-2 parameters
    samples, head_cfg, _ = _tiny_setup()
    trace = [0.2, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3]
    snapshots = {}

    def tau_fn(params, epoch):
        snapshots[epoch] = params.copy()
        return trace[epoch - 1]

    tc = TrainConfig(seed=2, max_epochs=50, patience=5)
    best, log = fit(samples, samples, head_cfg, tc, tau_fn=tau_fn)
    assert len(log.epochs) == 7
    assert log.best_epoch == 2
    assert log.best_tau == 0.3
    assert all(np.array_equal(a, b) for a, b in zip(best.arrays(), snapshots[2].arrays()))


def test_fit_single_epoch():
    samples, head_cfg, _ = _tiny_setup()
    tc = TrainConfig(seed=3, max_epochs=1)
    best, log = fit(samples, samples, head_cfg, tc)
    assert len(log.epochs) == 1
    assert log.best_epoch == 1


def test_fit_strict_improvement_runs_to_max_epochs():
    samples, head_cfg, _ = _tiny_setup()
    tc = TrainConfig(seed=4, max_epochs=6, patience=2)
    best, log = fit(samples, samples, head_cfg, tc, tau_fn=lambda p, e: 0.1 * e)
    assert len(log.epochs) == 6
    assert log.best_epoch == 6


def test_fit_patience_bound_property():
    samples, head_cfg, _ = _tiny_setup()
    rng = np.random.default_rng(45)
    for patience in (1, 2, 4):
        trace = rng.uniform(-1, 1, size=30).tolist()
        tc = TrainConfig(seed=5, max_epochs=30, patience=patience)
        _, log = fit(samples, samples, head_cfg, tc, tau_fn=lambda p, e: trace[e - 1])
        assert len(log.epochs) - log.best_epoch <= patience
        recorded = [r.val_tau for r in log.epochs]
        assert log.best_tau == max(recorded)
        assert log.best_epoch == recorded.index(max(recorded)) + 1


def test_fit_rejects_empty_sets():
    samples, head_cfg, _ = _tiny_setup()
    with pytest.raises(TrainError):
        fit([], samples, head_cfg, TrainConfig())
    with pytest.raises(TrainError):
        fit(samples, [], head_cfg, TrainConfig())


def test_fit_determinism_bitwise():
    samples, head_cfg, _ = _tiny_setup()
    tc = TrainConfig(seed=6, max_epochs=3)
    a, log_a = fit(samples, samples, head_cfg, tc)
    b, log_b = fit(samples, samples, head_cfg, tc)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    assert log_a.to_jsonl() == log_b.to_jsonl()


def test_trainlog_jsonl_excludes_timing_by_default():
    samples, head_cfg, _ = _tiny_setup()
    _, log = fit(samples, samples, head_cfg, TrainConfig(seed=7, max_epochs=2))
    assert "wall_time" not in log.to_jsonl()
    assert "wall_time_s" in log.to_jsonl(include_timing=True)
    assert len(log.to_jsonl().strip().splitlines()) == len(log.epochs)


def test_config_file_roundtrip():
    text = default_config_text()
    train_cfg, head_cfg = parse_config_text(text)
    assert train_cfg == TrainConfig()
    assert head_cfg.to_dict() == type(head_cfg)().to_dict()


def test_config_file_values_and_shared_seed():
    text = """
    learning_rate = 1e-3   # raised
    batch_size = 8
    aggregate = mean
    mlp1_hidden = 12,10
    use_image = false
    seed = 77
    """
    train_cfg, head_cfg = parse_config_text(text)
    assert train_cfg.learning_rate == 1e-3
    assert train_cfg.batch_size == 8
    assert train_cfg.seed == 77
    assert head_cfg.seed == 77
    assert head_cfg.aggregate == "mean"
    assert head_cfg.mlp1_hidden == (12, 10)
    assert head_cfg.use_image is False


def test_config_file_unknown_key_rejected():
    with pytest.raises(TrainError, match="unknown key"):
        parse_config_text("momentum = 0.9\n")


def test_train_config_validation():
    with pytest.raises(TrainError):
        TrainConfig(beta1=1.0)
    with pytest.raises(TrainError):
        TrainConfig(learning_rate=-1e-5)
    with pytest.raises(TrainError):
        TrainConfig(patience=0)
