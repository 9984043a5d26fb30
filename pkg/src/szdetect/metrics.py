"""Evaluation: AUROC with DeLong intervals, thresholds, subgroup and attribute
reports, and event-level false alarms per 24 hours."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import norm, rankdata

log = logging.getLogger(__name__)

RECALL_TARGETS = (0.5, 0.8, 0.9)
DELAY_TOLERANCES_S = (60.0, 300.0)


class MetricError(ValueError):
    """A metric is undefined for the given input."""


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise MetricError(f"{scores.size} scores for {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0/1")
    return scores, labels.astype(bool)


# ---------------------------------------------------------------------------
# AUROC and DeLong
# ---------------------------------------------------------------------------

def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(pos > neg) + 0.5 P(tie), via midranks."""
    s, y = _split(scores, labels)
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        raise MetricError(f"AUROC needs both classes (got {n1} positives, {n0} negatives)")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def roc_curve(scores, labels):
    """False/true positive rates at every distinct threshold, from (0,0) to (1,1)."""
    s, y = _split(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], y.size - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    tpr = np.r_[0.0, tps / max(y.sum(), 1)]
    fpr = np.r_[0.0, fps / max((~y).sum(), 1)]
    return fpr, tpr, np.r_[np.inf, s[distinct]]


def _placements(s, y):
    """DeLong structural components for positives (V10) and negatives (V01)."""
    pos, neg = s[y], s[~y]
    m, n = pos.size, neg.size
    tz = rankdata(s)
    v10 = (tz[y] - rankdata(pos)) / n
    v01 = 1.0 - (tz[~y] - rankdata(neg)) / m
    return v10, v01


@dataclass
class DelongCI:
    auroc: float
    variance: float
    half_width: float
    level: float

    @property
    def lower(self) -> float:
        return max(0.0, self.auroc - self.half_width)

    @property
    def upper(self) -> float:
        return min(1.0, self.auroc + self.half_width)


def delong_variance(scores, labels) -> float:
    s, y = _split(scores, labels)
    m, n = int(y.sum()), int((~y).sum())
    if m < 2 or n < 2:
        raise MetricError(f"DeLong variance needs >= 2 per class (got {m} pos, {n} neg)")
    v10, v01 = _placements(s, y)
    return float(np.var(v10, ddof=1) / m + np.var(v01, ddof=1) / n)


def delong_ci(scores, labels, level: float = 0.95) -> DelongCI:
    a = auroc(scores, labels)
    var = delong_variance(scores, labels)
    z = norm.ppf(0.5 + level / 2.0)
    return DelongCI(a, var, float(z * math.sqrt(max(var, 0.0))), level)


def delong_paired_test(scores_a, scores_b, labels) -> float:
    """Two-sided p-value for equal AUROC of two scorers on the same clips."""
    sa, y = _split(scores_a, labels)
    sb, _ = _split(scores_b, labels)
    if sa.shape != sb.shape:
        raise MetricError("paired DeLong test needs scores for the same clips")
    m, n = int(y.sum()), int((~y).sum())
    if m < 2 or n < 2:
        raise MetricError(f"paired DeLong test needs >= 2 per class (got {m} pos, {n} neg)")
    va10, va01 = _placements(sa, y)
    vb10, vb01 = _placements(sb, y)
    s10 = np.cov(np.vstack([va10, vb10]))
    s01 = np.cov(np.vstack([va01, vb01]))
    cov = s10 / m + s01 / n
    diff = va10.mean() - vb10.mean()
    var = cov[0, 0] + cov[1, 1] - 2 * cov[0, 1]
    if np.array_equal(sa, sb) or (diff == 0.0 and var <= 0.0):
        return 1.0
    if var <= 0.0:
        return 0.0
    z = abs(diff) / math.sqrt(var)
    return float(2.0 * norm.sf(z))


# ---------------------------------------------------------------------------
# Thresholds and FPR
# ---------------------------------------------------------------------------

def class_balance_threshold(scores, labels) -> float:
    """Threshold predicting as many positives (score >= thr) as there are gold positives.

    Ties at the threshold are all predicted positive, so the predicted count
    can exceed the gold count only when scores tie.
    """
    s, y = _split(scores, labels)
    if s.size == 0:
        raise MetricError("class-balance threshold of an empty score set")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("class-balance threshold needs at least one gold positive")
    thr = float(np.sort(s)[::-1][n_pos - 1])
    predicted = int((s >= thr).sum())
    if predicted > n_pos:
        log.warning("score ties at threshold %.6g: %d predicted positives for %d gold positives",
                    thr, predicted, n_pos)
    return thr


def false_positive_rate(scores, labels, threshold: float) -> float:
    s, y = _split(scores, labels)
    neg = ~y
    if not neg.any():
        raise MetricError("FPR needs at least one negative")
    return float((s[neg] >= threshold).sum() / neg.sum())


@dataclass
class AttributeFpr:
    attribute: str
    n_negatives: int
    false_positives: int
    fpr: float
    flagged: bool = False


def attribute_fpr(scores, gold, attributes: np.ndarray, names: Sequence[str],
                  threshold: float) -> List[AttributeFpr]:
    """FPR among gold-negative clips bearing each attribute; the last row is overall."""
    s, y = _split(scores, gold)
    attributes = np.asarray(attributes).reshape(len(s), len(names)).astype(bool)
    neg = ~y
    pred = s >= threshold
    rows = []
    for j, name in enumerate(names):
        sel = neg & attributes[:, j]
        k = int(sel.sum())
        if k == 0:
            rows.append(AttributeFpr(name, 0, 0, float("nan"), flagged=True))
            continue
        fp = int((pred & sel).sum())
        rows.append(AttributeFpr(name, k, fp, fp / k))
    k = int(neg.sum())
    fp = int((pred & neg).sum())
    rows.append(AttributeFpr("overall", k, fp, fp / k if k else float("nan"), flagged=k == 0))
    return rows


# ---------------------------------------------------------------------------
# Subgroups
# ---------------------------------------------------------------------------

@dataclass
class ScoreTable:
    """Per-clip scores with gold labels, subgroup tags and attribute bits."""

    refs: List[str]
    scores: np.ndarray
    gold: np.ndarray
    tags: Dict[str, np.ndarray] = field(default_factory=dict)
    attributes: Optional[np.ndarray] = None
    attribute_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.gold = np.asarray(self.gold, dtype=np.int64)
        if np.any((self.scores < 0) | (self.scores > 1)):
            raise MetricError("scores must be probabilities in [0, 1]")
        self.tags = {k: np.asarray(v, dtype=object) for k, v in self.tags.items()}

    def __len__(self):
        return len(self.refs)

    def subset(self, mask) -> "ScoreTable":
        mask = np.asarray(mask, dtype=bool)
        return ScoreTable(
            [r for r, k in zip(self.refs, mask) if k], self.scores[mask], self.gold[mask],
            {k: v[mask] for k, v in self.tags.items()},
            None if self.attributes is None else self.attributes[mask], list(self.attribute_names))


@dataclass
class Stratum:
    """A subgroup: clips whose tags match ``where``; if ``seizure_type`` is set,
    positives are restricted to that type while all negatives of the parent stay."""

    name: str
    where: Dict[str, object] = field(default_factory=dict)
    seizure_type: Optional[str] = None

    def mask(self, t: ScoreTable) -> np.ndarray:
        m = np.ones(len(t), dtype=bool)
        for key, val in self.where.items():
            col = t.tags.get(key)
            m &= np.zeros(len(t), bool) if col is None else np.array([str(v) == str(val) for v in col])
        if self.seizure_type is not None:
            types = t.tags.get("seizure_type", np.full(len(t), "", dtype=object))
            m &= (t.gold == 0) | np.array([str(v) == self.seizure_type for v in types])
        return m


def default_strata(seizure_types: Sequence[str] = ()) -> List[Stratum]:
    out = [
        Stratum("Overall"),
        Stratum("Adults", {"age_group": "adult"}),
        Stratum("Adults outside ICU", {"age_group": "adult", "icu": "0"}),
        Stratum("Adults from ICU", {"age_group": "adult", "icu": "1"}),
        Stratum("Pediatrics", {"age_group": "pediatric"}),
    ]
    out += [Stratum(f"Seizure type: {st}", seizure_type=st) for st in seizure_types]
    return out


@dataclass
class SubgroupRow:
    name: str
    n_pos: int
    n_neg: int
    auroc: float = float("nan")
    half_width: float = float("nan")
    status: str = "ok"  # ok | low_positive_count | not_computable

    @property
    def lower(self):
        lo = self.auroc - self.half_width
        return lo if math.isnan(lo) else max(0.0, lo)

    @property
    def upper(self):
        hi = self.auroc + self.half_width
        return hi if math.isnan(hi) else min(1.0, hi)


def subgroup_report(table: ScoreTable, strata: Sequence[Stratum], level: float = 0.95,
                    min_positives: int = 5) -> List[SubgroupRow]:
    rows = []
    for st in strata:
        sub = table.subset(st.mask(table))
        n_pos = int(sub.gold.sum())
        n_neg = len(sub) - n_pos
        row = SubgroupRow(st.name, n_pos, n_neg)
        if n_pos < 2 or n_neg < 2:
            row.status = "not_computable"
            if n_pos >= 1 and n_neg >= 1:
                row.auroc = auroc(sub.scores, sub.gold)
        else:
            ci = delong_ci(sub.scores, sub.gold, level)
            row.auroc, row.half_width = ci.auroc, ci.half_width
            if n_pos < min_positives:
                row.status = "low_positive_count"
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Events and clinical utility
# ---------------------------------------------------------------------------

@dataclass
class DetectedEvent:
    recording_id: str
    onset_s: float
    clip_index: int
    classification: str = ""  # TP | FP
    matched_onset_s: Optional[float] = None


def extract_events(scores, threshold: float, clip_len_s: float = 60.0,
                   recording_id: str = "") -> List[DetectedEvent]:
    """Merge runs of consecutive clips with score >= threshold into single events."""
    above = np.asarray(scores, dtype=np.float64) >= threshold
    starts = np.nonzero(above & ~np.r_[False, above[:-1]])[0]
    return [DetectedEvent(recording_id, float(i * clip_len_s), int(i)) for i in starts]


@dataclass
class RecordingScores:
    recording_id: str
    scores: np.ndarray  # per clip, temporal order
    true_onsets_s: Sequence[float]
    duration_s: Optional[float] = None
    clip_len_s: float = 60.0

    @property
    def hours(self) -> float:
        dur = self.duration_s if self.duration_s is not None else len(self.scores) * self.clip_len_s
        return dur / 3600.0


def match_events(event_onsets_s: Sequence[float], true_onsets_s: Sequence[float], delta_t_s: float):
    """Greedy nearest-first one-to-one matching with ``0 <= T < delta_t``.

    Returns ``(matches, early)`` where ``matches`` maps event index to true-onset
    index and ``early`` counts unmatched events that precede some true onset by
    less than ``delta_t``.
    """
    pairs = []
    for i, e in enumerate(event_onsets_s):
        for j, o in enumerate(true_onsets_s):
            T = e - o
            if 0.0 <= T < delta_t_s:
                pairs.append((T, e, j, i))
    pairs.sort()
    used_e, used_o, matches = set(), set(), {}
    for _, _, j, i in pairs:
        if i in used_e or j in used_o:
            continue
        used_e.add(i)
        used_o.add(j)
        matches[i] = j
    early = sum(1 for i, e in enumerate(event_onsets_s) if i not in matches
                and any(-delta_t_s < e - o < 0.0 for o in true_onsets_s))
    return matches, early


@dataclass
class UtilityResult:
    recall_target: float
    delta_t_s: float
    threshold: float
    event_recall: float
    clip_recall: float
    false_positives: int
    hours: float
    early_detections: int
    n_true_onsets: int
    n_detected: int
    target_met: bool = True

    @property
    def fps_per_24h(self) -> float:
        return self.false_positives / (self.hours / 24.0) if self.hours > 0 else float("nan")


def _score_at_threshold(recs: Sequence[RecordingScores], threshold: float, delta_t_s: float):
    fps = matched = early = n_true = 0
    clip_hits = clip_total = 0
    for r in recs:
        events = extract_events(r.scores, threshold, r.clip_len_s, r.recording_id)
        # detections are clip-resolved, so true onsets are compared at their clip start
        onsets = [math.floor(o / r.clip_len_s) * r.clip_len_s for o in r.true_onsets_s]
        m, e = match_events([ev.onset_s for ev in events], onsets, delta_t_s)
        fps += len(events) - len(m)
        matched += len(m)
        early += e
        n_true += len(onsets)
        idx = [int(o // r.clip_len_s) for o in onsets if int(o // r.clip_len_s) < len(r.scores)]
        clip_hits += int(sum(r.scores[i] >= threshold for i in idx))
        clip_total += len(idx)
    recall = matched / n_true if n_true else float("nan")
    clip_recall = clip_hits / clip_total if clip_total else float("nan")
    return recall, clip_recall, fps, early, n_true, matched


def select_recall_threshold(recs: Sequence[RecordingScores], recall_target: float, delta_t_s: float):
    """Largest threshold whose event-level recall reaches ``recall_target``.

    Returns ``(threshold, met)``; when no threshold reaches the target the
    one with the best recall (ties -> larger threshold) is returned with ``met=False``.
    """
    candidates = np.unique(np.concatenate([np.asarray(r.scores, float) for r in recs]))[::-1]
    best, best_recall = candidates[0], -1.0
    for thr in candidates:
        recall = _score_at_threshold(recs, thr, delta_t_s)[0]
        if recall >= recall_target:
            return float(thr), True
        if recall > best_recall:
            best, best_recall = thr, recall
    return float(best), False


def clinical_utility(recs: Sequence[RecordingScores], recall_target: float, delta_t_s: float,
                     threshold: Optional[float] = None) -> UtilityResult:
    """False-positive events per 24 h at the threshold reaching ``recall_target``."""
    if not 0.0 < recall_target <= 1.0:
        raise MetricError(f"recall target must be in (0, 1], got {recall_target}")
    if delta_t_s <= 0:
        raise MetricError(f"delay tolerance must be positive, got {delta_t_s}")
    n_true = sum(len(r.true_onsets_s) for r in recs)
    met = True
    if threshold is None:
        if n_true == 0:
            threshold = float(max(np.max(r.scores) for r in recs if len(r.scores)))
            log.warning("no true onsets: recall undefined, using the maximum score as threshold")
        else:
            threshold, met = select_recall_threshold(recs, recall_target, delta_t_s)
    recall, clip_recall, fps, early, n_true, matched = _score_at_threshold(recs, threshold, delta_t_s)
    hours = sum(r.hours for r in recs)
    return UtilityResult(recall_target, delta_t_s, threshold, recall, clip_recall, fps, hours,
                         early, n_true, matched, met)


def utility_grid(recs: Sequence[RecordingScores], recalls: Sequence[float] = RECALL_TARGETS,
                 deltas: Sequence[float] = DELAY_TOLERANCES_S) -> List[UtilityResult]:
    return [clinical_utility(recs, r, d) for r in recalls for d in deltas]
