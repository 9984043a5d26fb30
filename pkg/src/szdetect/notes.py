"""Weak clip labels from technician workflow notes.

Each note is a timestamped free-text event description.  A table of
case-insensitive regular expressions maps note text to attributes, and each
note labels only the 60-second clip in which its event began.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

CLIP_LEN_S = 60.0
SEIZURE = "seizure"
MATCH_MODES = ("substring", "anchored", "placeholder")


class NotesError(ValueError):
    pass


@dataclass(frozen=True)
class WorkflowNote:
    timestamp_s: float
    text: str

    def __post_init__(self):
        if not self.timestamp_s >= 0:
            raise NotesError(f"note timestamp must be >= 0, got {self.timestamp_s}")


@dataclass
class Reject:
    line: int
    reason: str
    raw: str


@dataclass
class ParsedNotes:
    notes: List[WorkflowNote]
    rejects: List[Reject] = field(default_factory=list)

    def __iter__(self):
        return iter(self.notes)

    def __len__(self):
        return len(self.notes)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_CLOCK = re.compile(r"^(?:(\d+):)?(\d{1,2}):(\d{1,2}(?:\.\d*)?)$")


def parse_timestamp(value: str) -> float:
    """Seconds from recording start; accepts plain seconds, ``MM:SS`` or ``HH:MM:SS(.f)``."""
    value = value.strip()
    m = _CLOCK.match(value)
    if m:
        hours = int(m.group(1) or 0)
        return hours * 3600 + int(m.group(2)) * 60 + float(m.group(3))
    return float(value)


def parse_notes_file(path) -> ParsedNotes:
    """Read a ``timestamp_s,text`` CSV; bad rows land in ``rejects`` with a reason."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise NotesError(f"cannot read notes file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return ParsedNotes([])
        cols = [h.strip().lower() for h in header]
        if "timestamp_s" not in cols or "text" not in cols:
            raise NotesError(f"{path}: header must contain timestamp_s and text, got {header}")
        ti, xi = cols.index("timestamp_s"), cols.index("text")
        notes, rejects = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            raw = ",".join(row)
            if len(row) <= max(ti, xi):
                rejects.append(Reject(line, "missing fields", raw))
                continue
            try:
                ts = parse_timestamp(row[ti])
            except ValueError:
                rejects.append(Reject(line, f"unparseable timestamp {row[ti]!r}", raw))
                continue
            if not np.isfinite(ts) or ts < 0:
                rejects.append(Reject(line, f"negative or non-finite timestamp {row[ti]!r}", raw))
                continue
            notes.append(WorkflowNote(ts, row[xi]))
    notes.sort(key=lambda n: n.timestamp_s)
    return ParsedNotes(notes, rejects)


def write_notes_file(path, notes: Iterable[WorkflowNote]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp_s", "text"])
        for n in notes:
            w.writerow([f"{n.timestamp_s:.3f}", n.text])


# ---------------------------------------------------------------------------
# Attribute table
# ---------------------------------------------------------------------------

@dataclass
class AttributeRule:
    name: str
    pattern: str
    mode: str = "substring"
    regex: Optional[re.Pattern] = None

    def matches(self, text: str) -> bool:
        if self.mode == "placeholder":
            return False
        if self.mode == "anchored":
            return self.regex.fullmatch(text.strip()) is not None
        return self.regex.search(text) is not None


class AttributeTable:
    """Ordered attribute rules; the order defines label-vector columns."""

    def __init__(self, rules: Sequence[AttributeRule]):
        names = [r.name for r in rules]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise NotesError(f"duplicate attribute names: {sorted(dupes)}")
        for r in rules:
            if r.mode not in MATCH_MODES:
                raise NotesError(f"{r.name}: unknown match mode {r.mode!r}")
            if r.mode != "placeholder":
                alternatives = [a.strip() for a in r.pattern.split("|")]
                if r.mode == "anchored":
                    alternatives = [a.lstrip("^").rstrip("$") for a in alternatives]
                try:
                    r.regex = re.compile("|".join(alternatives), re.IGNORECASE)
                except re.error as exc:
                    raise NotesError(f"{r.name}: bad pattern {r.pattern!r}: {exc}") from exc
        self.rules = list(rules)

    @property
    def names(self) -> List[str]:
        return [r.name for r in self.rules]

    def __len__(self):
        return len(self.rules)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @classmethod
    def parse(cls, text: str) -> "AttributeTable":
        rules = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise NotesError(f"attribute table line {lineno}: expected 'name = pattern [mode]'")
            name, rhs = (s.strip() for s in line.split("=", 1))
            mode = "substring"
            m = re.search(r"\[(\w+)\]\s*$", rhs)
            if m:
                mode = m.group(1).lower()
                rhs = rhs[: m.start()].strip()
            if not name or (not rhs and mode != "placeholder"):
                raise NotesError(f"attribute table line {lineno}: empty name or pattern")
            rules.append(AttributeRule(name, rhs, mode))
        return cls(rules)

    @classmethod
    def load(cls, path) -> "AttributeTable":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls) -> "AttributeTable":
        text = resources.files("szdetect.resources").joinpath("attributes.txt").read_text("utf-8")
        return cls.parse(text)


def match_attributes(text: str, table: AttributeTable) -> set:
    return {r.name for r in table.rules if r.matches(text)}


# ---------------------------------------------------------------------------
# Clip labels
# ---------------------------------------------------------------------------

@dataclass
class ClipLabels:
    attributes: List[str]
    matrix: np.ndarray  # (n_clips, n_attributes) uint8
    out_of_range: int = 0
    match_counts: Dict[str, int] = field(default_factory=dict)

    def __len__(self):
        return self.matrix.shape[0]

    def vector(self, clip_index: int) -> np.ndarray:
        return self.matrix[clip_index]

    @property
    def seizure_onset(self) -> np.ndarray:
        return self.matrix[:, self.attributes.index(SEIZURE)]


def assign_labels(notes: Iterable[WorkflowNote], n_clips: int, table: AttributeTable,
                  clip_len_s: float = CLIP_LEN_S) -> ClipLabels:
    """Union each note's attributes into the clip where its event began."""
    if n_clips < 0:
        raise NotesError("n_clips must be >= 0")
    mat = np.zeros((n_clips, len(table)), dtype=np.uint8)
    counts = {n: 0 for n in table.names}
    out_of_range = 0
    for note in notes:
        idx = int(note.timestamp_s // clip_len_s)
        if idx >= n_clips:
            out_of_range += 1
            continue
        for name in match_attributes(note.text, table):
            mat[idx, table.index(name)] = 1
            counts[name] += 1
    return ClipLabels(table.names, mat, out_of_range, counts)


def write_label_matrix(path, labels: ClipLabels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_index", *labels.attributes])
        for i, row in enumerate(labels.matrix):
            w.writerow([i, *map(int, row)])


def read_label_matrix(path) -> ClipLabels:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    attrs = rows[0][1:]
    mat = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.uint8).reshape(-1, len(attrs))
    return ClipLabels(attrs, mat)
