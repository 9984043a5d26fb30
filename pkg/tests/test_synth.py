import csv
import json

import numpy as np
import pytest
from scipy.signal import welch
from sklearn.linear_model import LogisticRegression

from szdetect.data import clip_array, read_native
from szdetect.metrics import auroc
from szdetect.notes import AttributeTable, assign_labels, match_attributes
from szdetect.synth import (ATTRIBUTE_OF, DEFAULT_SYNONYMS, FOCAL_EVENTS, MAX_ABS_UV, CorpusProfile, ProfileError,
                            generate, generate_one, plant_log, write_corpus)

TABLE = AttributeTable.default()
QUIET = {k: 0.0 for k in ATTRIBUTE_OF}


def small(**kw):
    base = dict(n_patients=3, hours_per_patient=0.5, sample_rate_hz=32.0, seed=11)
    base.update(kw)
    return CorpusProfile(**base)


def test_byte_identical_outputs(tmp_path):
    prof = small(note_fp_rate=0.2, timestamp_jitter_s=3.0)
    write_corpus(generate(prof), tmp_path / "a")
    write_corpus(generate(prof), tmp_path / "b")
    for f in sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    assert (tmp_path / "a" / "recordings.jsonl").exists()


def test_generate_one_matches_full():
    prof = small()
    full = generate(prof)
    one = generate_one(prof, 2)
    assert np.array_equal(one.recording.samples, full.recordings[2].recording.samples)
    assert one.events == full.recordings[2].events


def test_zero_rates_give_pure_background():
    c = generate(small(event_rates=dict(QUIET)))
    assert c.ledger() == []
    assert all(r.gold_seizure().sum() == 0 and r.notes == [] for r in c.recordings)


def test_planted_seizure_count_and_location(tmp_path):
    prof = CorpusProfile(n_patients=1, hours_per_patient=10.0, sample_rate_hz=16.0,
                         event_rates={**QUIET, "seizure": 1.0}, seed=5)
    corpus = generate(prof)
    planted = [e for e in plant_log(prof) if e.kind == "seizure"]
    write_corpus(corpus, tmp_path)
    with open(tmp_path / "gold.csv") as fh:
        rows = list(csv.DictReader(fh))
    positives = [r["clip_ref"] for r in rows if r["seizure"] == "1"]
    assert len(positives) == len(planted) > 0
    for e in planted:
        start = e.clip_index * 60.0
        assert start <= e.onset_s and e.onset_s + e.duration_s <= start + 60.0
        assert f"{e.recording_id}:{e.clip_index}" in positives


def test_ledger_in_bounds_and_amplitude():
    c = generate(small(event_rates={"seizure": 6, "movement": 10, "spike": 4, "slowing": 4,
                                    "ekg": 2, "hv": 2, "awake": 1, "asleep": 1}, confound_strength=1.0))
    dur = c.profile.hours_per_patient * 3600
    for e in c.ledger():
        assert 0 <= e.onset_s < dur
    for r in c.recordings:
        x = r.recording.samples
        assert np.isfinite(x).all() and np.abs(x).max() <= MAX_ABS_UV


def test_focal_events_one_per_clip():
    c = generate(small(event_rates={"seizure": 6, "movement": 12, "spike": 6, "slowing": 6}))
    for r in c.recordings:
        clips = [e.clip_index for e in r.events if e.kind in FOCAL_EVENTS]
        assert len(clips) == len(set(clips))


def test_synonyms_hit_their_attribute_only():
    for kind, words in DEFAULT_SYNONYMS.items():
        for w in words:
            assert match_attributes(w, TABLE) == {ATTRIBUTE_OF[kind]}, w


def test_noiseless_notes_recover_ledger():
    c = generate(small(n_patients=4, hours_per_patient=1.0,
                       event_rates={"seizure": 4, "movement": 6, "spike": 4, "slowing": 3,
                                    "ekg": 1, "hv": 1, "awake": 1, "asleep": 1}))
    for r in c.recordings:
        want = np.zeros((r.n_clips, len(TABLE)), dtype=np.uint8)
        for e in r.events:
            want[e.clip_index, TABLE.index(ATTRIBUTE_OF[e.kind])] = 1
        got = assign_labels(r.notes, r.n_clips, TABLE)
        assert np.array_equal(got.matrix, want)
        assert np.array_equal(got.seizure_onset, r.gold_seizure())


def test_false_positive_notes_inflate_positives_by_rate():
    c = generate(CorpusProfile(n_patients=400, hours_per_patient=0.5, sample_rate_hz=16.0, note_fp_rate=0.1,
                               event_rates={**QUIET, "seizure": 12, "movement": 6, "spike": 4}, seed=3))
    extracted = planted = 0
    for r in c.recordings:
        extracted += int(assign_labels(r.notes, r.n_clips, TABLE).seizure_onset.sum())
        planted += int(r.gold_seizure().sum())
    assert abs(extracted / planted - 1.10) <= 0.02


def test_profile_validation_and_round_trip():
    with pytest.raises(ProfileError):
        small(confound_strength=1.5).validate()
    with pytest.raises(ProfileError):
        small(event_rates={"dragons": 1}).validate()
    with pytest.raises(ProfileError):
        small(hours_per_patient=0.51).validate()
    with pytest.raises(ProfileError):
        CorpusProfile.from_dict({"n_patients": 2, "bogus": 1})
    prof = small(note_fp_rate=0.3)
    assert CorpusProfile.from_dict(json.loads(json.dumps(prof.to_dict()))) == prof


def test_written_corpus_reads_back(tmp_path):
    c = generate(small())
    write_corpus(c, tmp_path)
    index = [json.loads(l) for l in (tmp_path / "recordings.jsonl").read_text().splitlines()]
    assert len(index) == 3
    rec = read_native(tmp_path / index[0]["path"])
    assert np.array_equal(rec.samples, c.recordings[0].recording.samples)
    assert rec.metadata["age_group"] in ("adult", "pediatric")


# -- bandpower probe -------------------------------------------------------------

BANDS = [(0.5, 2.0), (2.0, 4.0), (4.0, 6.0), (6.0, 8.01)]


def _bandpower(corpus, kinds):
    X, y = [], []
    for sr in corpus.recordings:
        arr = clip_array(sr.recording)
        f, p = welch(arr, fs=sr.recording.sample_rate_hz, nperseg=64, axis=1)
        kind_of = {e.clip_index: e.kind for e in sr.events if e.kind in FOCAL_EVENTS}
        for i in range(len(arr)):
            k = kind_of.get(i, "background")
            if k in kinds:
                X.append(np.log([p[i][(f >= lo) & (f < hi)].mean() for lo, hi in BANDS]))
                y.append(int(k == "seizure"))
    return np.array(X), np.array(y)


def probe_auroc(confound, kinds, seed=0):
    prof = CorpusProfile(n_patients=48, hours_per_patient=1.0, sample_rate_hz=16.0, pediatric_fraction=0.0,
                         seizure_uv=20.0, movement_gain=1.0, movement_duration_s=(5.0, 30.0),
                         confound_strength=confound, event_rates={"seizure": 8, "movement": 8}, seed=seed)
    X, y = _bandpower(generate(prof), kinds)
    half = len(y) // 2
    clf = LogisticRegression(max_iter=2000).fit(X[:half], y[:half])
    return auroc(clf.decision_function(X[half:]), y[half:])


def test_probe_separates_seizure_from_background():
    assert probe_auroc(0.0, {"seizure", "background"}) > 0.99


def test_probe_confusion_grows_with_confound():
    a = [probe_auroc(c, {"seizure", "movement"}) for c in (0.0, 0.5, 1.0)]
    assert a[0] > a[1] > a[2]
