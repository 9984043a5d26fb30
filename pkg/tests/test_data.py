import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from szdetect.data import (STANDARD_CHANNELS, DataError, DatasetManifest, EdfError, EegRecording,
                           MissingChannelError, clip_array, clip_ref, compute_norm_stats, n_clips,
                           normalize_channel_name, normalize_clip, parse_clip_ref, read_edf, read_native,
                           resample_linear, segment_clips, split_by_patient, split_counts, write_edf,
                           write_native)


def recording(seconds, rate=200.0, seed=0, rid="r1"):
    x = np.random.default_rng(seed).normal(size=(19, int(seconds * rate)))
    return EegRecording(rid, "p1", x, rate, list(STANDARD_CHANNELS))


def test_edf_ramp_round_trip(tmp_path):
    rate, n = 200, 2000
    ramp = np.linspace(-100, 100, n)
    x = np.stack([ramp + k for k in range(19)])
    labels = [f"EEG {c.upper()}-REF" for c in STANDARD_CHANNELS]
    write_edf(tmp_path / "a.edf", x, rate, labels, patient="P7", phys_range=(-200, 200))
    rec = read_edf(tmp_path / "a.edf", target_rate=None)
    step = 400 / 65535
    assert rec.channel_names == list(STANDARD_CHANNELS)
    assert rec.sample_rate_hz == 200 and rec.patient_id == "P7"
    assert np.max(np.abs(rec.samples - x)) <= step / 2 + 1e-9


def test_edf_missing_channel(tmp_path):
    labels = [c for c in STANDARD_CHANNELS if c != "O2"] + ["EKG"]
    write_edf(tmp_path / "m.edf", np.zeros((19, 200)), 200, labels)
    with pytest.raises(MissingChannelError) as exc:
        read_edf(tmp_path / "m.edf")
    assert exc.value.missing == ["O2"]


def test_edf_bad_header_length(tmp_path):
    write_edf(tmp_path / "b.edf", np.zeros((19, 200)), 200, list(STANDARD_CHANNELS))
    raw = bytearray((tmp_path / "b.edf").read_bytes())
    raw[184:192] = b"999     "
    (tmp_path / "b.edf").write_bytes(bytes(raw))
    with pytest.raises(EdfError):
        read_edf(tmp_path / "b.edf")
    (tmp_path / "short.edf").write_bytes(b"0" * 100)
    with pytest.raises(EdfError):
        read_edf(tmp_path / "short.edf")


def test_edf_truncated_body(tmp_path):
    write_edf(tmp_path / "t.edf", np.zeros((19, 400)), 200, list(STANDARD_CHANNELS))
    raw = (tmp_path / "t.edf").read_bytes()
    (tmp_path / "t.edf").write_bytes(raw[:-10])
    with pytest.raises(EdfError):
        read_edf(tmp_path / "t.edf")


def test_edf_resamples_to_target(tmp_path):
    x = np.tile(np.arange(512.0), (19, 1))
    write_edf(tmp_path / "r.edf", x, 256, list(STANDARD_CHANNELS), phys_range=(0, 1024))
    rec = read_edf(tmp_path / "r.edf")
    assert rec.sample_rate_hz == 200 and rec.n_samples == 400


def test_channel_aliases():
    assert normalize_channel_name("EEG FP1-REF") == "Fp1"
    assert normalize_channel_name("T7") == "T3"
    assert normalize_channel_name(" cz-le ") == "Cz"
    assert normalize_channel_name("EKG") == "EKG"


def test_native_round_trip(tmp_path):
    rec = recording(2.0)
    rec.metadata = {"age_group": "adult"}
    d1 = write_native(tmp_path / "a.sznat", rec)
    back = read_native(tmp_path / "a.sznat")
    assert np.array_equal(back.samples, rec.samples.astype(np.float32))
    assert back.metadata == rec.metadata and back.sample_rate_hz == 200.0
    assert write_native(tmp_path / "b.sznat", back) == d1


def test_clip_counts():
    assert n_clips(recording(3600, rate=2.0)) == 60
    assert n_clips(recording(3659, rate=2.0)) == 60
    clips = segment_clips(recording(130))
    assert len(clips) == 2 and clips[0].samples.shape == (12_000, 19)
    assert clips[1].start_s == 60.0 and clips[1].ref == "r1:1"


def test_clip_array_layout():
    rec = recording(120, rate=4.0)
    arr = clip_array(rec)
    assert arr.shape == (2, 240, 19)
    assert np.array_equal(arr[1, :, 5], rec.samples[5, 240:480])


def test_short_recording_gives_no_clips():
    assert segment_clips(recording(30)) == []


def test_clip_ref_round_trip():
    assert parse_clip_ref(clip_ref("a:b", 12)) == ("a:b", 12)


def test_constant_channel_normalizes_to_zero():
    x = np.random.default_rng(0).normal(size=(3, 100, 4))
    x[..., 2] = 7.0
    stats = compute_norm_stats(x)
    out = normalize_clip(x[0], stats)
    assert np.all(out[:, 2] == 0.0) and np.isfinite(out).all()


def test_normalized_stats():
    x = np.random.default_rng(1).normal(3.0, 5.0, size=(20, 500, 19))
    out = normalize_clip(x, compute_norm_stats(x))
    assert np.all(np.abs(out.mean(axis=(0, 1))) < 0.05)
    assert np.all(np.abs(out.std(axis=(0, 1)) - 1) < 0.05)
    again = normalize_clip(out, compute_norm_stats(out))
    assert np.all(np.abs(again.mean(axis=(0, 1))) < 1e-5)


def test_leakage_canary():
    rng = np.random.default_rng(2)
    train, test = rng.normal(0, 1, size=(5, 100, 3)), rng.normal(4, 2, size=(5, 100, 3))
    a = compute_norm_stats(train)
    b = compute_norm_stats(np.concatenate([train, test]))
    assert not np.allclose(a.mean, b.mean)


def test_norm_stats_empty():
    with pytest.raises(DataError):
        compute_norm_stats([])


def test_split_counts_examples():
    assert split_counts(10) == [5, 1, 4]
    assert split_counts(3) == [1, 1, 1]
    with pytest.raises(DataError):
        split_counts(2)


def test_split_is_seeded():
    pats = [f"p{i}" for i in range(10)]
    a, b = split_by_patient(pats, seed=3), split_by_patient(pats, seed=3)
    assert a.patient_split == b.patient_split
    assert [len(a.patients(s)) for s in ("train", "val", "test")] == [5, 1, 4]


@given(st.integers(3, 60), st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_split_disjoint_and_complete(n, seed):
    pats = [f"p{i}" for i in range(n)]
    m = split_by_patient(pats, seed=seed)
    groups = [set(m.patients(s)) for s in ("train", "val", "test")]
    assert all(groups)
    assert sum(len(g) for g in groups) == n and set.union(*groups) == set(pats)


@given(st.lists(st.floats(0.05, 1.0), min_size=3, max_size=3), st.integers(3, 200))
@settings(max_examples=100, deadline=None)
def test_split_counts_sum(fractions, n):
    c = split_counts(n, fractions)
    assert sum(c) == n and min(c) >= 1


def test_resample_identity_and_linear():
    x = np.arange(10.0)
    assert resample_linear(x, 5, 5) is x
    y = resample_linear(x, 10, 5)
    assert np.allclose(y, np.arange(0, 10, 2.0))


def test_manifest_digest_tracks_content(tmp_path):
    m = DatasetManifest({"p1": "train"}, [{"clip_ref": "r:0", "split": "train"}],
                        {"content_digests": {"r": "aaa"}})
    d = m.digest()
    m.write(tmp_path / "m.jsonl")
    back = DatasetManifest.read(tmp_path / "m.jsonl")
    assert back.digest() == d
    back.info["content_digests"]["r"] = "bbb"
    assert back.digest() != d
    back.info["content_digests"]["r"] = "aaa"
    back.info["note"] = "unrelated"
    assert back.digest() == d
    back.records[0]["split"] = "test"
    assert back.digest() != d


def test_recording_validation():
    rec = recording(1)
    rec.samples[0, 0] = np.inf
    with pytest.raises(DataError):
        rec.validate()
