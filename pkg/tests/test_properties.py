"""Hypothesis property tests for the serialization and statistic invariants."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from polos import EmbeddingSample, read_bundle, tau_b, tau_c, write_bundle

from helpers import tau_b_oracle, tau_c_oracle

finite_f32 = st.floats(allow_nan=False, allow_infinity=False, width=32)


@st.composite
def embedding_samples(draw):
    d_clip = draw(st.integers(1, 6))
    d_rb = draw(st.integers(1, 6))
    n = draw(st.integers(1, 3))

    def vec(k):
        return np.array(draw(st.lists(finite_f32, min_size=k, max_size=k)), dtype=np.float32)

    return EmbeddingSample(
        sample_id=draw(st.text(min_size=0, max_size=20)),
        cand_clip=vec(d_clip),
        cand_rb=vec(d_rb),
        refs_clip=np.stack([vec(d_clip) for _ in range(n)]),
        refs_rb=np.stack([vec(d_rb) for _ in range(n)]),
        img=vec(d_clip),
        score=draw(st.one_of(st.none(), st.floats(0, 1, width=32))),
    )


@given(sample=embedding_samples())
@settings(max_examples=60, deadline=None)
def test_bundle_roundtrip_is_bitwise_lossless(tmp_path_factory, sample):
    path = tmp_path_factory.mktemp("peb") / "one.peb"
    write_bundle([sample], path)
    (back,) = read_bundle(path)
    assert back.bitwise_equal(sample)


rank_lists = st.lists(st.integers(0, 6), min_size=2, max_size=60)


@given(rank_lists, rank_lists)
@settings(max_examples=150, deadline=None)
def test_tau_matches_brute_force_oracle(xs, ys):
    n = min(len(xs), len(ys))
    x = np.array(xs[:n], dtype=float)
    y = np.array(ys[:n], dtype=float)
    if len(np.unique(x)) < 2 or len(np.unique(y)) < 2:
        return
    assert abs(tau_b(x, y) - tau_b_oracle(x, y)) <= 1e-12
    assert abs(tau_c(x, y) - tau_c_oracle(x, y)) <= 1e-12
