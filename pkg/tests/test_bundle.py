import numpy as np
import pytest

from polos import (
    BundleError,
    DatasetSplit,
    EmbeddingSample,
    read_bundle,
    synth_samples,
    validate_bundle,
    write_bundle,
)
from polos.bundle import (
    _HEADER,
    read_header,
    read_split_manifest,
    splits_from_manifest,
    write_split_manifest,
)

from helpers import make_sample


def test_empty_bundle_is_exactly_header_sized(tmp_path):
    path = tmp_path / "empty.peb"
    written = write_bundle([], path, d_clip=4, d_rb=6)
    assert written == _HEADER.size == path.stat().st_size
    header = read_header(path)
    assert (header.d_clip, header.d_rb, header.sample_count) == (4, 6, 0)
    assert read_bundle(path) == []


def test_record_float_count_matches_layout(tmp_path):
    # one sample, N=2, d_clip=4, d_rb=6: 4 + 6 + 2*4 + 2*6 + 4 + 1 = 35 floats
    rng = np.random.default_rng(0)
    sample = make_sample(rng, 4, 6, 2, sid="abc")
    path = tmp_path / "one.peb"
    written = write_bundle([sample], path)
    id_bytes = len(b"abc")
    assert written == _HEADER.size + 4 + id_bytes + 4 + 35 * 4


def test_ref_count_mismatch_rejected(tmp_path):
    rng = np.random.default_rng(1)
    sample = make_sample(rng, 4, 6, 2)
    sample.refs_rb = rng.standard_normal((3, 6)).astype(np.float32)
    with pytest.raises(BundleError, match="ref count mismatch"):
        write_bundle([sample], tmp_path / "bad.peb")


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.peb"
    path.write_bytes(b"XXXX" + b"\x00" * 40)
    with pytest.raises(BundleError, match="bad magic"):
        read_bundle(path)


def test_unsupported_version(tmp_path):
    path = tmp_path / "v9.peb"
    good = tmp_path / "good.peb"
    write_bundle(synth_samples(1, seed=0), good)
    data = bytearray(good.read_bytes())
    data[4] = 9
    path.write_bytes(bytes(data))
    with pytest.raises(BundleError, match="version"):
        read_bundle(path)


def test_roundtrip_bitwise_100_random_samples(tmp_path):
    samples = synth_samples(100, d_clip=7, d_rb=9, n_refs=(1, 5), seed=42)
    path = tmp_path / "bundle.peb"
    write_bundle(samples, path)
    back = read_bundle(path)
    assert len(back) == 100
    assert all(a.bitwise_equal(b) for a, b in zip(samples, back))


def test_truncated_payload_gives_error_not_partial_result(tmp_path):
    samples = synth_samples(5, d_clip=4, d_rb=6, seed=3)
    path = tmp_path / "full.peb"
    write_bundle(samples, path)
    data = path.read_bytes()
    cut = tmp_path / "cut.peb"
    cut.write_bytes(data[: len(data) - 10])
    with pytest.raises(BundleError, match="truncated payload"):
        read_bundle(cut)


def test_trailing_garbage_rejected(tmp_path):
    samples = synth_samples(2, seed=3)
    path = tmp_path / "extra.peb"
    write_bundle(samples, path)
    path.write_bytes(path.read_bytes() + b"\x00\x01")
    with pytest.raises(BundleError, match="trailing"):
        read_bundle(path)


def test_nan_in_vector_rejected_on_read(tmp_path):
    samples = synth_samples(1, d_clip=4, d_rb=6, n_refs=1, with_scores=False, seed=5)
    path = tmp_path / "nan.peb"
    write_bundle(samples, path)
    data = bytearray(path.read_bytes())
    # overwrite the first cand_clip float (right after the id and n_refs)
    offset = _HEADER.size + 4 + len(samples[0].sample_id) + 4
    data[offset : offset + 4] = np.float32(np.nan).tobytes()
    path.write_bytes(bytes(data))
    with pytest.raises(BundleError, match="non-finite"):
        read_bundle(path)


def test_mixed_score_presence_rejected(tmp_path):
    samples = synth_samples(2, seed=7)
    samples[1].score = None
    with pytest.raises(BundleError, match="mixed score presence"):
        write_bundle(samples, tmp_path / "mixed.peb")


def test_scoreless_bundle_roundtrip(tmp_path):
    samples = synth_samples(4, with_scores=False, seed=8)
    path = tmp_path / "noscore.peb"
    write_bundle(samples, path)
    assert not read_header(path).has_scores
    back = read_bundle(path)
    assert all(s.score is None for s in back)
    assert all(a.bitwise_equal(b) for a, b in zip(samples, back))


def test_validate_clean_bundle_has_no_findings():
    report = validate_bundle(synth_samples(10, seed=9))
    assert report.ok
    assert report.sample_count == 10
    assert report.scored_fraction == 1.0


def test_validate_flags_score_out_of_range():
    samples = synth_samples(3, seed=10)
    samples[1].score = 1.5
    report = validate_bundle(samples)
    assert ("s000001", "score out of range") in report.findings


def test_validate_flags_nonfinite_vector():
    samples = synth_samples(3, seed=11)
    samples[2].img[0] = np.inf
    report = validate_bundle(samples)
    assert ("s000002", "non-finite vector") in report.findings


def test_validate_flags_ref_count_mismatch():
    samples = synth_samples(2, n_refs=2, seed=12)
    samples[0].refs_rb = samples[0].refs_rb[:1]
    report = validate_bundle(samples)
    assert ("s000000", "ref count mismatch") in report.findings


def test_zero_refs_rejected(tmp_path):
    rng = np.random.default_rng(13)
    sample = EmbeddingSample(
        sample_id="empty",
        cand_clip=rng.standard_normal(4).astype(np.float32),
        cand_rb=rng.standard_normal(6).astype(np.float32),
        refs_clip=np.empty((0, 4), dtype=np.float32),
        refs_rb=np.empty((0, 6), dtype=np.float32),
        img=rng.standard_normal(4).astype(np.float32),
    )
    with pytest.raises(BundleError, match="reference"):
        write_bundle([sample], tmp_path / "zero.peb")


def test_id_length_independence(tmp_path):
    # records are length-prefixed, so ids of wildly different lengths coexist
    samples = synth_samples(3, seed=14)
    samples[0].sample_id = "x"
    samples[1].sample_id = "a" * 300
    samples[2].sample_id = "ünïcödé-⊙"
    path = tmp_path / "ids.peb"
    write_bundle(samples, path)
    back = read_bundle(path)
    assert [s.sample_id for s in back] == [s.sample_id for s in samples]
    assert all(a.bitwise_equal(b) for a, b in zip(samples, back))


def test_split_manifest_roundtrip(tmp_path):
    entries = [
        {"sample_id": "a", "split": "train", "source": "mscoco"},
        {"sample_id": "b", "split": "valid", "source": "nocaps"},
        {"sample_id": "c", "split": "test", "source": "mscoco"},
    ]
    path = tmp_path / "manifest.jsonl"
    write_split_manifest(path, entries)
    assert read_split_manifest(path) == entries
    splits = splits_from_manifest(entries)
    assert splits["train"].sample_ids == ["a"]
    assert splits["test"].sample_ids == ["c"]


def test_manifest_overlap_rejected():
    entries = [
        {"sample_id": "a", "split": "train", "source": "x"},
        {"sample_id": "a", "split": "test", "source": "x"},
    ]
    with pytest.raises(ValueError, match="assigned to both"):
        splits_from_manifest(entries)


def test_dataset_split_rejects_duplicates():
    with pytest.raises(ValueError, match="duplicate"):
        DatasetSplit("train", ["a", "a"])
