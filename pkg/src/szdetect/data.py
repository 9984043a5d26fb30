"""Recording ingestion, clip segmentation, normalization and patient splits."""

from __future__ import annotations

import hashlib
import json
import logging
import re
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

STANDARD_CHANNELS = (
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8",
    "T3", "C3", "Cz", "C4", "T4",
    "T5", "P3", "Pz", "P4", "T6", "O1", "O2",
)
TARGET_RATE_HZ = 200.0
CLIP_LEN_S = 60.0
EPS_STD = 1e-6
SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.5, 0.1, 0.4)


class DataError(ValueError):
    """Bad or inconsistent input data."""


class EdfError(DataError):
    pass


class MissingChannelError(DataError):
    def __init__(self, missing: Sequence[str], path=None):
        self.missing = list(missing)
        where = f"{path}: " if path else ""
        super().__init__(f"{where}missing required channel(s): {', '.join(self.missing)}")


@dataclass
class EegRecording:
    recording_id: str
    patient_id: str
    samples: np.ndarray  # (channels, time), microvolts
    sample_rate_hz: float
    channel_names: List[str]
    metadata: Dict = field(default_factory=dict)  # age_group, icu, hospital

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    def validate(self) -> None:
        if self.sample_rate_hz <= 0:
            raise DataError(f"{self.recording_id}: sample rate must be positive")
        if self.samples.shape[0] != len(self.channel_names):
            raise DataError(f"{self.recording_id}: {self.samples.shape[0]} rows for "
                            f"{len(self.channel_names)} channel names")
        if not np.isfinite(self.samples).all():
            raise DataError(f"{self.recording_id}: NaN or Inf samples")


# ---------------------------------------------------------------------------
# Channel names
# ---------------------------------------------------------------------------

def _load_aliases() -> Dict[str, str]:
    text = resources.files("szdetect.resources").joinpath("channel_aliases.txt").read_text("utf-8")
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.upper()] = v
    return out


_ALIASES = _load_aliases()
_STD_UPPER = {c.upper(): c for c in STANDARD_CHANNELS}


def normalize_channel_name(label: str) -> str:
    """``"EEG FP1-REF"`` -> ``"Fp1"``; unknown labels come back stripped."""
    name = label.strip()
    name = re.sub(r"^EEG\s*", "", name, flags=re.IGNORECASE).strip()
    name = re.sub(r"-(REF|LE|AR|AVG|A1|A2|M1|M2)$", "", name, flags=re.IGNORECASE).strip()
    up = name.upper()
    if up in _ALIASES:
        return _ALIASES[up]
    return _STD_UPPER.get(up, name)


def select_standard_channels(samples: np.ndarray, labels: Sequence[str], path=None) -> np.ndarray:
    norm = [normalize_channel_name(l) for l in labels]
    missing = [c for c in STANDARD_CHANNELS if c not in norm]
    if missing:
        raise MissingChannelError(missing, path)
    return np.stack([samples[norm.index(c)] for c in STANDARD_CHANNELS])


def resample_linear(x: np.ndarray, rate: float, target: float) -> np.ndarray:
    """Linear-interpolation resampling along the last axis."""
    if rate == target:
        return x
    n = x.shape[-1]
    n_out = int(np.floor(n * target / rate))
    t_in = np.arange(n) / rate
    t_out = np.arange(n_out) / target
    if x.ndim == 1:
        return np.interp(t_out, t_in, x)
    return np.stack([np.interp(t_out, t_in, row) for row in x])


# ---------------------------------------------------------------------------
# EDF
# ---------------------------------------------------------------------------

def _field(buf: bytes, start: int, width: int) -> str:
    return buf[start:start + width].decode("ascii", errors="replace").strip()


def read_edf(path, target_rate: Optional[float] = TARGET_RATE_HZ, recording_id: Optional[str] = None,
             patient_id: Optional[str] = None, metadata: Optional[dict] = None) -> EegRecording:
    """Read an EDF file, select the 19 standard electrodes and resample to ``target_rate``."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 256:
        raise EdfError(f"{path}: file shorter than the 256-byte fixed header")
    try:
        header_bytes = int(_field(raw, 184, 8))
        n_records = int(_field(raw, 236, 8))
        record_s = float(_field(raw, 244, 8))
        ns = int(_field(raw, 252, 4))
    except ValueError as exc:
        raise EdfError(f"{path}: malformed fixed header ({exc})") from exc
    if ns < 1 or header_bytes != 256 * (ns + 1) or len(raw) < header_bytes:
        raise EdfError(f"{path}: header length field {header_bytes} inconsistent with {ns} signals")
    if record_s <= 0:
        raise EdfError(f"{path}: non-positive data record duration {record_s}")

    def column(offset_units: int, width: int, conv=str):
        base = 256 + offset_units * ns
        vals = []
        for i in range(ns):
            s = _field(raw, base + i * width, width)
            try:
                vals.append(conv(s))
            except ValueError as exc:
                raise EdfError(f"{path}: bad signal header value {s!r}") from exc
        return vals

    labels = column(0, 16)
    phys_min = np.array(column(16 + 80 + 8, 8, float))
    phys_max = np.array(column(16 + 80 + 8 + 8, 8, float))
    dig_min = np.array(column(16 + 80 + 8 + 16, 8, float))
    dig_max = np.array(column(16 + 80 + 8 + 24, 8, float))
    spr = np.array(column(16 + 80 + 8 + 32 + 80, 8, int))
    if np.any(spr <= 0) or np.any(dig_max <= dig_min):
        raise EdfError(f"{path}: invalid samples-per-record or digital range")
    record_bytes = int(spr.sum()) * 2
    body = len(raw) - header_bytes
    if n_records == -1:
        if body % record_bytes:
            raise EdfError(f"{path}: data section is not a whole number of records")
        n_records = body // record_bytes
    if n_records <= 0:
        raise EdfError(f"{path}: zero-length recording")
    if body != n_records * record_bytes:
        raise EdfError(f"{path}: header declares {n_records} records "
                       f"({n_records * record_bytes} bytes) but file holds {body} data bytes")

    data = np.frombuffer(raw, dtype="<i2", offset=header_bytes).reshape(n_records, -1)
    bounds = np.concatenate([[0], np.cumsum(spr)])
    rates = spr / record_s
    keep = {normalize_channel_name(l): i for i, l in enumerate(labels)}
    missing = [c for c in STANDARD_CHANNELS if c not in keep]
    if missing:
        raise MissingChannelError(missing, path)
    rate_out = target_rate or float(rates[keep[STANDARD_CHANNELS[0]]])
    rows = []
    for ch in STANDARD_CHANNELS:
        i = keep[ch]
        dig = data[:, bounds[i]:bounds[i + 1]].reshape(-1).astype(np.float64)
        phys = (dig - dig_min[i]) * (phys_max[i] - phys_min[i]) / (dig_max[i] - dig_min[i]) + phys_min[i]
        rows.append(resample_linear(phys, rates[i], rate_out))
    n = min(len(r) for r in rows)
    rec = EegRecording(
        recording_id=recording_id or path.stem,
        patient_id=patient_id or (_field(raw, 8, 80).split(" ")[0] or path.stem),
        samples=np.stack([r[:n] for r in rows]),
        sample_rate_hz=float(rate_out),
        channel_names=list(STANDARD_CHANNELS),
        metadata=dict(metadata or {}),
    )
    rec.validate()
    return rec


def write_edf(path, samples: np.ndarray, rate: float, labels: Sequence[str], patient: str = "X",
              record_s: float = 1.0, phys_range: Optional[tuple] = None) -> None:
    """Write a plain EDF file with 16-bit samples (full digital range)."""
    samples = np.asarray(samples, dtype=np.float64)
    ns, n = samples.shape
    spr = int(round(rate * record_s))
    if spr < 1 or n % spr:
        raise EdfError("sample count must be a whole number of data records")
    n_records = n // spr
    lo, hi = phys_range or (float(samples.min()), float(samples.max()))
    if hi <= lo:
        hi = lo + 1.0
    dmin, dmax = -32768, 32767

    def pad(s, w):
        s = str(s)
        if len(s) > w:
            s = s[:w]
        return s.ljust(w).encode("ascii")

    def num(x, w=8):
        s = f"{x:.6g}" if isinstance(x, float) else str(x)
        return pad(s, w)

    head = b"".join([
        pad("0", 8), pad(patient, 80), pad("Startdate 01-JAN-2020 X X X", 80),
        pad("01.01.20", 8), pad("00.00.00", 8), pad(256 * (ns + 1), 8), pad("", 44),
        pad(n_records, 8), num(float(record_s)), pad(ns, 4),
    ])
    sig = b"".join(pad(l, 16) for l in labels)
    sig += pad("AgAgCl electrode", 80) * ns
    sig += pad("uV", 8) * ns
    sig += num(lo) * ns + num(hi) * ns
    sig += pad(dmin, 8) * ns + pad(dmax, 8) * ns
    sig += pad("", 80) * ns + pad(spr, 8) * ns + pad("", 32) * ns
    # physical range as it will be parsed back, so quantization is self-consistent
    lo_p, hi_p = float(num(lo).decode()), float(num(hi).decode())
    dig = np.round((samples - lo_p) * (dmax - dmin) / (hi_p - lo_p) + dmin)
    dig = np.clip(dig, dmin, dmax).astype("<i2")
    body = dig.reshape(ns, n_records, spr).transpose(1, 0, 2).tobytes()
    Path(path).write_bytes(head + sig + body)


# ---------------------------------------------------------------------------
# Native container
# ---------------------------------------------------------------------------

NATIVE_MAGIC = b"SZEEGNAT"
NATIVE_VERSION = 1


def write_native(path, rec: EegRecording) -> str:
    """Write the interchange container; returns the sha256 of the bytes written."""
    rec.validate()
    meta = json.dumps({
        "recording_id": rec.recording_id, "patient_id": rec.patient_id,
        "channel_names": list(rec.channel_names), "metadata": rec.metadata,
    }, sort_keys=True).encode("utf-8")
    head = NATIVE_MAGIC + struct.pack("<HHdQI", NATIVE_VERSION, rec.samples.shape[0],
                                      float(rec.sample_rate_hz), rec.n_samples, len(meta))
    payload = head + meta + np.ascontiguousarray(rec.samples, dtype="<f4").tobytes()
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def read_native(path) -> EegRecording:
    raw = Path(path).read_bytes()
    if raw[:8] != NATIVE_MAGIC:
        raise DataError(f"{path}: not a native EEG container")
    version, n_ch, rate, n_samp, meta_len = struct.unpack_from("<HHdQI", raw, 8)
    if version != NATIVE_VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    off = 8 + struct.calcsize("<HHdQI")
    meta = json.loads(raw[off:off + meta_len])
    off += meta_len
    if len(raw) - off != n_ch * n_samp * 4:
        raise DataError(f"{path}: sample block size does not match header")
    samples = np.frombuffer(raw, dtype="<f4", offset=off).reshape(n_ch, n_samp)
    rec = EegRecording(meta["recording_id"], meta["patient_id"], samples, rate,
                       meta["channel_names"], meta.get("metadata", {}))
    rec.validate()
    return rec


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Clips
# ---------------------------------------------------------------------------

@dataclass
class Clip:
    recording_id: str
    clip_index: int
    start_s: float
    samples: np.ndarray  # (L, channels)
    labels: Optional[np.ndarray] = None
    gold: Optional[int] = None
    tags: Dict = field(default_factory=dict)

    @property
    def ref(self) -> str:
        return clip_ref(self.recording_id, self.clip_index)


def clip_ref(recording_id: str, clip_index: int) -> str:
    return f"{recording_id}:{clip_index}"


def parse_clip_ref(ref: str):
    rid, idx = ref.rsplit(":", 1)
    return rid, int(idx)


def n_clips(rec: EegRecording, clip_len_s: float = CLIP_LEN_S) -> int:
    return int(rec.n_samples // int(round(clip_len_s * rec.sample_rate_hz)))


def clip_array(rec: EegRecording, clip_len_s: float = CLIP_LEN_S) -> np.ndarray:
    """All full clips of ``rec`` as one ``(n_clips, L, channels)`` array."""
    L = int(round(clip_len_s * rec.sample_rate_hz))
    n = rec.n_samples // L
    return np.ascontiguousarray(rec.samples[:, : n * L].reshape(rec.samples.shape[0], n, L).transpose(1, 2, 0))


def segment_clips(rec: EegRecording, clip_len_s: float = CLIP_LEN_S) -> List[Clip]:
    """Non-overlapping fixed-length clips; a trailing partial clip is dropped."""
    arr = clip_array(rec, clip_len_s)
    if len(arr) == 0:
        log.warning("%s: %.1f s is shorter than one %.0f s clip", rec.recording_id, rec.duration_s, clip_len_s)
    tags = dict(rec.metadata)
    return [Clip(rec.recording_id, i, i * clip_len_s, arr[i], tags=tags) for i in range(len(arr))]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]))


def compute_norm_stats(clips: Iterable, eps_std: float = EPS_STD) -> NormStats:
    """Per-channel mean/std over every sample of the given (training) clips."""
    total = sq = None
    count = 0
    for c in clips:
        x = np.asarray(c.samples if isinstance(c, Clip) else c, dtype=np.float64)
        x = x.reshape(-1, x.shape[-1])
        if total is None:
            total, sq = np.zeros(x.shape[1]), np.zeros(x.shape[1])
        total += x.sum(axis=0)
        sq += (x * x).sum(axis=0)
        count += x.shape[0]
    if count == 0:
        raise DataError("cannot compute normalization stats from an empty training set")
    mean = total / count
    var = np.maximum(sq / count - mean ** 2, 0.0)
    return NormStats(mean, np.maximum(np.sqrt(var), eps_std))


def normalize_clip(c, stats: NormStats, eps_std: float = EPS_STD):
    """``(x - mean) / max(std, eps)`` per channel; accepts a Clip or an array."""
    x = c.samples if isinstance(c, Clip) else np.asarray(c)
    out = ((x - stats.mean) / np.maximum(stats.std, eps_std)).astype(np.float32)
    if isinstance(c, Clip):
        return Clip(c.recording_id, c.clip_index, c.start_s, out, c.labels, c.gold, dict(c.tags))
    return out


# ---------------------------------------------------------------------------
# Splits and manifests
# ---------------------------------------------------------------------------

def split_counts(n: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> List[int]:
    """Largest-remainder allocation with at least one patient per split."""
    if n < len(fractions):
        raise DataError(f"need at least {len(fractions)} patients to split, got {n}")
    f = np.asarray(fractions, dtype=float)
    f = f / f.sum()
    raw = f * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    for i in range(len(counts)):
        if counts[i] == 0:
            counts[int(np.argmax(counts))] -= 1
            counts[i] = 1
    return counts.tolist()


@dataclass
class DatasetManifest:
    patient_split: Dict[str, str]
    records: List[dict] = field(default_factory=list)
    info: Dict = field(default_factory=dict)

    def split_of(self, patient_id: str) -> str:
        return self.patient_split[patient_id]

    def clips(self, split: str) -> List[dict]:
        return [r for r in self.records if r["split"] == split]

    def patients(self, split: str) -> List[str]:
        return sorted(p for p, s in self.patient_split.items() if s == split)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.patient_split, sort_keys=True).encode())
        h.update(json.dumps(self.records, sort_keys=True).encode())
        h.update(json.dumps(self.info.get("content_digests", {}), sort_keys=True).encode())
        return h.hexdigest()

    def write(self, path) -> None:
        with open(path, "w") as fh:
            head = {"manifest": {**self.info, "patient_split": self.patient_split, "digest": self.digest()}}
            fh.write(json.dumps(head, sort_keys=True) + "\n")
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        with open(path) as fh:
            lines = [json.loads(l) for l in fh if l.strip()]
        if not lines or "manifest" not in lines[0]:
            raise DataError(f"{path}: missing manifest header line")
        head = dict(lines[0]["manifest"])
        split = head.pop("patient_split")
        head.pop("digest", None)
        return cls(split, lines[1:], head)


def split_by_patient(patients: Sequence[str], fractions: Sequence[float] = DEFAULT_FRACTIONS,
                     seed: int = 0) -> DatasetManifest:
    """Randomly assign whole patients to train/val/test."""
    uniq = sorted(set(patients))
    counts = split_counts(len(uniq), fractions)
    order = np.random.default_rng(seed).permutation(len(uniq))
    assignment, start = {}, 0
    for name, c in zip(SPLITS, counts):
        for i in order[start:start + c]:
            assignment[uniq[i]] = name
        start += c
    return DatasetManifest(assignment, [], {"fractions": list(fractions), "seed": seed})
