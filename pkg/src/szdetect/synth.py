"""Seeded synthetic EEG corpus with planted events and technician-style notes.

The morphologies are stylized, not physiological.  They exist so the
pipeline's relationships can be exercised end to end: seizures are
amplitude-growing rhythmic discharges with frequency drift, movement
artifacts are short broadband bursts that take on a seizure-like rhythm as
``confound_strength`` rises, and pediatric recordings carry a slower,
larger background that masks seizures more.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import STANDARD_CHANNELS, EegRecording, clip_ref, write_native
from .notes import WorkflowNote, write_notes_file

CLIP_LEN_S = 60.0
MAX_ABS_UV = 500.0

# one clip hosts at most one of these
FOCAL_EVENTS = ("seizure", "spike", "slowing", "movement")
# long-lived state events, placed independently
STATE_EVENTS = ("ekg", "hv", "awake", "asleep")

ATTRIBUTE_OF = {
    "seizure": "seizure", "spike": "spike", "slowing": "slowing",
    "movement": "movement artifact", "ekg": "EKG artifact", "hv": "hyperventilation",
    "awake": "awake", "asleep": "asleep",
}

DEFAULT_SYNONYMS = {
    "seizure": {"seizure": 3, "sz": 4, "Sz onset": 2, "absence": 1, "spasm": 1},
    "spike": {"spike": 3, "spikes": 2, "sharp spike": 1},
    "slowing": {"slowing": 3, "slow": 2, "focal slowing": 1},
    "movement": {"movement": 2, "mvt": 3, "pt mvt": 2, "patient movement": 1},
    "ekg": {"ekg": 2, "EKG artifact": 1},
    "hv": {"HV": 2, "hv start": 1},
    "awake": {"awake": 2, "pt awake": 1},
    "asleep": {"asleep": 2, "sleep": 1},
}

SEIZURE_TYPES = ("focal", "evolving", "generalized")

REGIONS = {
    "left_temporal": ("F7", "T3", "T5", "C3", "F3"),
    "right_temporal": ("F8", "T4", "T6", "C4", "F4"),
    "left_parasagittal": ("Fp1", "F3", "C3", "P3", "O1"),
    "right_parasagittal": ("Fp2", "F4", "C4", "P4", "O2"),
    "central": ("Fz", "Cz", "Pz", "C3", "C4"),
}
FRONTAL_TEMPORAL = ("Fp1", "Fp2", "F7", "F8", "F3", "F4", "Fz", "T3", "T4")


class ProfileError(ValueError):
    pass


@dataclass
class CorpusProfile:
    n_patients: int = 20
    hours_per_patient: float = 1.0
    pediatric_fraction: float = 0.5
    icu_fraction: float = 0.3
    event_rates: Dict[str, float] = field(default_factory=lambda: {
        "seizure": 2.0, "spike": 4.0, "slowing": 3.0, "movement": 6.0,
        "ekg": 0.5, "hv": 0.5, "awake": 0.5, "asleep": 0.5})
    seizure_type_mix: Dict[str, float] = field(default_factory=lambda: {
        "focal": 0.5, "evolving": 0.3, "generalized": 0.2})
    confound_strength: float = 0.0
    note_fp_rate: float = 0.0
    timestamp_jitter_s: float = 0.0
    synonyms: Dict[str, Dict[str, float]] = field(default_factory=lambda: {
        k: dict(v) for k, v in DEFAULT_SYNONYMS.items()})
    sample_rate_hz: float = 200.0
    background_uv: float = 15.0
    seizure_uv: float = 45.0
    # pediatric background amplitude relative to adult; the planted subgroup gap
    pediatric_background_gain: float = 1.6
    adult_peak_hz: float = 9.0
    pediatric_peak_hz: float = 4.5
    icu_movement_factor: float = 1.5
    movement_duration_s: Tuple[float, float] = (3.0, 10.0)
    movement_gain: float = 1.6
    seed: int = 0

    def validate(self) -> None:
        if self.n_patients < 1 or self.hours_per_patient <= 0:
            raise ProfileError("need at least one patient and positive hours")
        for name in ("pediatric_fraction", "icu_fraction", "confound_strength", "note_fp_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ProfileError(f"{name} must be in [0, 1], got {v}")
        for k, r in self.event_rates.items():
            if k not in ATTRIBUTE_OF:
                raise ProfileError(f"unknown event type {k!r}")
            if r < 0:
                raise ProfileError(f"event rate for {k} must be >= 0")
        if self.timestamp_jitter_s < 0 or self.sample_rate_hz <= 0:
            raise ProfileError("jitter must be >= 0 and sample rate positive")
        if self.sample_rate_hz < 16:
            raise ProfileError("sample rate below 16 Hz cannot carry the event morphologies")
        lo, hi = self.movement_duration_s
        if not 0 < lo <= hi < CLIP_LEN_S:
            raise ProfileError("movement duration range must lie inside one clip")
        if (self.hours_per_patient * 3600) % CLIP_LEN_S:
            raise ProfileError("recording duration must be a whole number of 60 s clips")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusProfile":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ProfileError(f"unknown profile keys: {sorted(unknown)}")
        d = dict(d)
        if "movement_duration_s" in d:
            d["movement_duration_s"] = tuple(d["movement_duration_s"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PlantedEvent:
    recording_id: str
    kind: str
    onset_s: float
    duration_s: float
    channels: List[str]
    seizure_type: Optional[str] = None

    @property
    def clip_index(self) -> int:
        return int(self.onset_s // CLIP_LEN_S)


@dataclass
class SyntheticRecording:
    recording: EegRecording
    events: List[PlantedEvent]
    notes: List[WorkflowNote]
    false_positive_notes: int = 0

    @property
    def n_clips(self) -> int:
        return int(self.recording.n_samples // int(CLIP_LEN_S * self.recording.sample_rate_hz))

    def gold_seizure(self) -> np.ndarray:
        y = np.zeros(self.n_clips, dtype=np.int64)
        for e in self.events:
            if e.kind == "seizure":
                y[e.clip_index] = 1
        return y

    def gold_types(self) -> List[str]:
        out = [""] * self.n_clips
        for e in self.events:
            if e.kind == "seizure":
                out[e.clip_index] = e.seizure_type or ""
        return out


@dataclass
class Corpus:
    profile: CorpusProfile
    recordings: List[SyntheticRecording]

    def ledger(self) -> List[PlantedEvent]:
        return [e for r in self.recordings for e in r.events]


# ---------------------------------------------------------------------------
# Signal primitives
# ---------------------------------------------------------------------------

def _taper(n: int, edge: int) -> np.ndarray:
    w = np.ones(n)
    edge = max(1, min(edge, n // 2))
    ramp = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, edge))
    w[:edge] = ramp
    w[n - edge:] = ramp[::-1]
    return w


def background(rng: np.random.Generator, n: int, fs: float, peak_hz: float, rms: float) -> np.ndarray:
    """1/f-shaped noise with a spectral peak, shape (19, n)."""
    n_ch = len(STANDARD_CHANNELS)
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    shape = 1.0 / np.maximum(freqs, 0.5) ** 0.9
    shape += 0.6 * np.exp(-0.5 * ((freqs - peak_hz) / 1.0) ** 2)
    shape[0] = 0.0
    white = rng.standard_normal((n_ch, n)) * 0.8 + rng.standard_normal(n) * 0.6
    x = np.fft.irfft(np.fft.rfft(white, axis=1) * shape, n=n, axis=1)
    return x * (rms / (x.std(axis=1, keepdims=True) + 1e-12))


def _chan_idx(names: Sequence[str]) -> List[int]:
    return [STANDARD_CHANNELS.index(c) for c in names]


def _seizure_wave(rng, n, fs, kind):
    t = np.arange(n) / fs
    dur = n / fs
    if kind == "evolving":
        f0, f1 = rng.uniform(1.5, 2.2), rng.uniform(3.2, 4.2)
    else:
        f0 = rng.uniform(2.8, 3.8)
        f1 = f0 - rng.uniform(0.6, 1.2)
    phase = 2 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t * t / dur)
    wave = np.sin(phase)
    if kind != "evolving":
        # spike-and-wave: sharpen with a harmonic
        wave = wave + 0.5 * np.sin(2 * phase + 0.5)
    envelope = (0.25 + 0.75 * (t / dur) ** 0.8) * _taper(n, int(0.5 * fs))
    return wave * envelope


def _movement_wave(rng, n, fs, confound):
    k = max(1, int(0.15 * fs))
    # broadband: white noise plus a smoothed copy for low-frequency sway
    burst = 0.7 * rng.standard_normal(n) + 0.9 * np.convolve(rng.standard_normal(n), np.ones(k) / np.sqrt(k), "same")
    # the seizure-like part borrows the seizure chirp, so overlap is morphological as well as spectral
    rhythm = _seizure_wave(rng, n, fs, SEIZURE_TYPES[int(rng.integers(len(SEIZURE_TYPES)))])
    burst *= rhythm.std() / (burst.std() + 1e-12)
    # constant-power mix: confound moves spectral shape, not loudness
    w = ((1.0 - confound) * burst + confound * rhythm) / np.hypot(1.0 - confound, confound)
    return w * _taper(n, max(1, int(0.1 * fs)))


def _spike_train(rng, n, fs):
    out = np.zeros(n)
    t = np.arange(n) / fs
    for c in rng.uniform(0.2, n / fs - 0.4, size=rng.integers(2, 6)):
        out += np.exp(-0.5 * ((t - c) / 0.035) ** 2) * 2.0
        out -= np.exp(-0.5 * ((t - c - 0.12) / 0.12) ** 2) * 0.8
    return out


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _choose(rng, weights: Dict[str, float]) -> str:
    keys = list(weights)
    p = np.asarray([weights[k] for k in keys], dtype=float)
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


def _generate_recording(profile: CorpusProfile, index: int, rng: np.random.Generator) -> SyntheticRecording:
    fs = profile.sample_rate_hz
    dur_s = profile.hours_per_patient * 3600.0
    n = int(round(dur_s * fs))
    n_clips = int(dur_s // CLIP_LEN_S)
    pid = f"P{index:04d}"
    rid = f"R{index:04d}"
    pediatric = rng.random() < profile.pediatric_fraction
    icu = rng.random() < profile.icu_fraction
    meta = {"age_group": "pediatric" if pediatric else "adult", "icu": "1" if icu else "0",
            "hospital": "childrens" if pediatric else "adult"}
    peak = profile.pediatric_peak_hz if pediatric else profile.adult_peak_hz
    peak = min(peak, 0.4 * fs)
    rms = profile.background_uv * (profile.pediatric_background_gain if pediatric else 1.0)
    x = background(rng, n, fs, peak, rms)

    hours = profile.hours_per_patient
    counts = {}
    for kind in FOCAL_EVENTS + STATE_EVENTS:
        rate = profile.event_rates.get(kind, 0.0)
        if kind == "movement" and icu:
            rate *= profile.icu_movement_factor
        counts[kind] = int(rng.poisson(rate * hours)) if rate > 0 else 0
    n_focal = sum(counts[k] for k in FOCAL_EVENTS)
    if n_focal > n_clips:
        raise ProfileError(f"{rid}: {n_focal} focal events do not fit in {n_clips} clips")
    clips = rng.permutation(n_clips)[:n_focal]
    events: List[PlantedEvent] = []
    ci = 0
    for kind in FOCAL_EVENTS:
        for _ in range(counts[kind]):
            clip = int(clips[ci])
            ci += 1
            start = clip * CLIP_LEN_S
            if kind == "seizure":
                d = rng.uniform(15.0, 40.0)
                stype = _choose(rng, profile.seizure_type_mix)
                chans = list(STANDARD_CHANNELS) if stype == "generalized" else list(
                    REGIONS[list(REGIONS)[rng.integers(len(REGIONS))]])
            elif kind == "movement":
                d, stype = rng.uniform(*profile.movement_duration_s), None
                chans = list(FRONTAL_TEMPORAL) if rng.random() < 0.5 else list(STANDARD_CHANNELS)
            elif kind == "slowing":
                d, stype = rng.uniform(10.0, 30.0), None
                chans = list(REGIONS[list(REGIONS)[rng.integers(len(REGIONS))]])
            else:
                d, stype = rng.uniform(1.5, 4.0), None
                chans = list(REGIONS[list(REGIONS)[rng.integers(len(REGIONS))]])[:3]
            onset = start + rng.uniform(0.0, CLIP_LEN_S - d - 0.5)
            events.append(PlantedEvent(rid, kind, float(onset), float(d), chans, stype))
    for kind in STATE_EVENTS:
        for _ in range(counts[kind]):
            d = {"ekg": 300.0, "hv": 180.0}.get(kind, 0.0)
            onset = rng.uniform(0.0, max(dur_s - max(d, 1.0), 1.0))
            events.append(PlantedEvent(rid, kind, float(onset), d, list(STANDARD_CHANNELS)))
    events.sort(key=lambda e: (e.onset_s, e.kind))

    for e in events:
        i0 = int(e.onset_s * fs)
        m = min(int(e.duration_s * fs), n - i0)
        if m <= 1:
            continue
        idx = _chan_idx(e.channels)
        if e.kind == "seizure":
            w = _seizure_wave(rng, m, fs, e.seizure_type) * profile.seizure_uv
            gains = rng.uniform(0.7, 1.0, size=len(idx))
            x[idx, i0:i0 + m] += gains[:, None] * w
        elif e.kind == "movement":
            w = _movement_wave(rng, m, fs, profile.confound_strength) * profile.seizure_uv * profile.movement_gain
            gains = rng.uniform(0.8, 1.0, size=len(idx))
            x[idx, i0:i0 + m] += gains[:, None] * w
        elif e.kind == "slowing":
            t = np.arange(m) / fs
            w = np.sin(2 * np.pi * rng.uniform(0.8, 1.5) * t) * _taper(m, int(fs)) * profile.seizure_uv * 0.8
            x[idx, i0:i0 + m] += w
        elif e.kind == "spike":
            x[idx, i0:i0 + m] += _spike_train(rng, m, fs) * profile.seizure_uv
        elif e.kind == "ekg":
            t = np.arange(m) / fs
            beat = np.exp(-0.5 * ((t % 0.83) / 0.02) ** 2) * 8.0
            x[:, i0:i0 + m] += beat
        elif e.kind == "hv":
            t = np.arange(m) / fs
            ramp = np.minimum(t / 60.0, 1.0) * _taper(m, int(10 * fs))
            x[:, i0:i0 + m] += np.sin(2 * np.pi * 1.0 * t) * ramp * profile.background_uv * 0.8
        # awake/asleep are note-only state changes
    np.clip(x, -MAX_ABS_UV, MAX_ABS_UV, out=x)

    notes: List[WorkflowNote] = []
    for e in events:
        text = _choose(rng, profile.synonyms[e.kind])
        ts = e.onset_s + (rng.normal(0.0, profile.timestamp_jitter_s) if profile.timestamp_jitter_s else 0.0)
        notes.append(WorkflowNote(float(min(max(ts, 0.0), dur_s - 1e-3)), text))
    # technician over-calls: seizure notes on other abnormal-looking events
    n_fp = 0
    seizure_clips = {e.clip_index for e in events if e.kind == "seizure"}
    decoys = [e for e in events if e.kind in ("movement", "spike", "slowing")
              and e.clip_index not in seizure_clips]
    used = set()
    for _ in range(counts["seizure"]):
        if rng.random() >= profile.note_fp_rate:
            continue
        free = [e for e in decoys if e.clip_index not in used]
        if free:
            e = free[int(rng.integers(len(free)))]
            ts = e.onset_s
        else:
            taken = seizure_clips | used
            options = [c for c in range(n_clips) if c not in taken]
            if not options:
                continue
            ts = options[int(rng.integers(len(options)))] * CLIP_LEN_S + rng.uniform(0, CLIP_LEN_S - 1)
        used.add(int(ts // CLIP_LEN_S))
        notes.append(WorkflowNote(float(ts), _choose(rng, profile.synonyms["seizure"])))
        n_fp += 1
    notes.sort(key=lambda nt: nt.timestamp_s)

    rec = EegRecording(rid, pid, x.astype(np.float32), fs, list(STANDARD_CHANNELS), meta)
    return SyntheticRecording(rec, events, notes, n_fp)


def generate(profile: CorpusProfile) -> Corpus:
    """Generate every recording; each draws from its own child seed stream."""
    profile.validate()
    children = np.random.SeedSequence(profile.seed).spawn(profile.n_patients)
    recs = [_generate_recording(profile, i, np.random.default_rng(s)) for i, s in enumerate(children)]
    return Corpus(profile, recs)


def generate_one(profile: CorpusProfile, index: int) -> SyntheticRecording:
    """Recording ``index`` alone; identical to the same entry of :func:`generate`."""
    profile.validate()
    child = np.random.SeedSequence(profile.seed).spawn(profile.n_patients)[index]
    return _generate_recording(profile, index, np.random.default_rng(child))


def plant_log(profile: CorpusProfile) -> List[PlantedEvent]:
    return generate(profile).ledger()


# ---------------------------------------------------------------------------
# On-disk corpus
# ---------------------------------------------------------------------------

def write_corpus(corpus: Corpus, out_dir) -> Path:
    """Lay the corpus out as native containers, notes CSVs, gold labels and the ledger."""
    out = Path(out_dir)
    (out / "recordings").mkdir(parents=True, exist_ok=True)
    (out / "notes").mkdir(exist_ok=True)
    index = []
    for sr in corpus.recordings:
        r = sr.recording
        path = out / "recordings" / f"{r.recording_id}.sznat"
        digest = write_native(path, r)
        write_notes_file(out / "notes" / f"{r.recording_id}.csv", sr.notes)
        index.append({"recording_id": r.recording_id, "patient_id": r.patient_id,
                      "path": f"recordings/{r.recording_id}.sznat", "notes": f"notes/{r.recording_id}.csv",
                      "sample_rate_hz": r.sample_rate_hz, "n_samples": r.n_samples,
                      "metadata": r.metadata, "digest": digest})
    with open(out / "recordings.jsonl", "w") as fh:
        for row in index:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    with open(out / "gold.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_ref", "seizure", "seizure_type"])
        for sr in corpus.recordings:
            gold, types = sr.gold_seizure(), sr.gold_types()
            for i in range(sr.n_clips):
                w.writerow([clip_ref(sr.recording.recording_id, i), int(gold[i]), types[i]])
    with open(out / "ledger.jsonl", "w") as fh:
        for e in corpus.ledger():
            fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")
    (out / "profile.json").write_text(json.dumps(corpus.profile.to_dict(), indent=2, sort_keys=True))
    return out
