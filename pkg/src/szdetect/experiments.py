"""Desk-scale experiments on the synthetic corpus.

Each experiment generates a corpus, splits patients, extracts weak labels
from the notes, trains the requested models and scores them against the
exact gold labels.  The runners return plain dataclasses so the acceptance
tests and the CLI can share them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import clip_array, clip_ref, compute_norm_stats, normalize_clip, split_by_patient
from .metrics import (ScoreTable, RecordingScores, attribute_fpr, auroc, class_balance_threshold,
                      clinical_utility, default_strata, delong_ci, subgroup_report)
from .model import ModelConfig, predict_seizure_prob
from .notes import AttributeTable, assign_labels
from .synth import ATTRIBUTE_OF, Corpus, CorpusProfile, generate
from .train import TrainConfig, TrainData, TrainResult, train_from_scratch

log = logging.getLogger(__name__)


@dataclass
class SplitArrays:
    refs: List[str]
    x: np.ndarray  # (N, L, C) normalized
    weak: np.ndarray  # (N, n_attr) note-derived labels
    truth: np.ndarray  # (N, n_attr) labels from the plant ledger
    gold: np.ndarray  # (N,) seizure onset
    seizure_type: List[str]
    tags: List[Dict[str, str]]
    recording_ids: List[str]
    n_clips_per_recording: Dict[str, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.refs)

    def subset(self, idx) -> "SplitArrays":
        idx = np.asarray(idx)
        take = lambda seq: [seq[i] for i in idx]
        return SplitArrays(take(self.refs), self.x[idx], self.weak[idx], self.truth[idx], self.gold[idx],
                           take(self.seizure_type), take(self.tags), take(self.recording_ids),
                           dict(self.n_clips_per_recording))


@dataclass
class PreparedCorpus:
    corpus: Corpus
    attributes: List[str]
    splits: Dict[str, SplitArrays]
    onsets: Dict[str, List[float]]


def prepare(corpus: Corpus, split_seed: int = 0, fractions=(0.6, 0.2, 0.2),
            table: Optional[AttributeTable] = None) -> PreparedCorpus:
    """Patient-level split, weak labels from notes, and train-set normalization."""
    table = table or AttributeTable.default()
    names = table.names
    patients = [sr.recording.patient_id for sr in corpus.recordings]
    manifest = split_by_patient(patients, fractions, seed=split_seed)
    parts: Dict[str, dict] = {s: {"refs": [], "x": [], "weak": [], "truth": [], "gold": [], "type": [],
                                  "tags": [], "rid": [], "n": {}} for s in ("train", "val", "test")}
    onsets: Dict[str, List[float]] = {}
    for sr in corpus.recordings:
        rec = sr.recording
        part = parts[manifest.split_of(rec.patient_id)]
        arr = clip_array(rec)
        n = arr.shape[0]
        weak = assign_labels(sr.notes, n, table).matrix
        truth = np.zeros_like(weak)
        for e in sr.events:
            if e.clip_index < n:
                truth[e.clip_index, names.index(ATTRIBUTE_OF[e.kind])] = 1
        part["refs"] += [clip_ref(rec.recording_id, i) for i in range(n)]
        part["x"].append(arr)
        part["weak"].append(weak)
        part["truth"].append(truth)
        part["gold"].append(sr.gold_seizure())
        part["type"] += sr.gold_types()
        part["tags"] += [dict(rec.metadata)] * n
        part["rid"] += [rec.recording_id] * n
        part["n"][rec.recording_id] = n
        onsets[rec.recording_id] = sorted(e.onset_s for e in sr.events if e.kind == "seizure")
    stats = compute_norm_stats(parts["train"]["x"])
    splits = {}
    for s, p in parts.items():
        x = normalize_clip(np.concatenate(p["x"]), stats)
        splits[s] = SplitArrays(p["refs"], x, np.concatenate(p["weak"]), np.concatenate(p["truth"]),
                                np.concatenate(p["gold"]), p["type"], p["tags"], p["rid"], p["n"])
    return PreparedCorpus(corpus, names, splits, onsets)


def train_data(prep: PreparedCorpus, labels: str = "weak", train_idx=None) -> TrainData:
    tr, va = prep.splits["train"], prep.splits["val"]
    if train_idx is not None:
        tr = tr.subset(train_idx)
    y = tr.weak if labels == "weak" else tr.truth
    return TrainData(tr.x, y, va.x, va.gold, prep.attributes)


def score_table(prep: PreparedCorpus, scores: np.ndarray, split: str = "test") -> ScoreTable:
    sp = prep.splits[split]
    keys = sorted({k for t in sp.tags for k in t})
    tags = {k: [t.get(k, "") for t in sp.tags] for k in keys}
    tags["seizure_type"] = list(sp.seizure_type)
    return ScoreTable(sp.refs, scores, sp.gold, tags, sp.truth, prep.attributes)


def recording_scores(prep: PreparedCorpus, scores: np.ndarray, split: str = "test") -> List[RecordingScores]:
    sp = prep.splits[split]
    out, start = [], 0
    for rid, n in sp.n_clips_per_recording.items():
        out.append(RecordingScores(rid, scores[start:start + n], prep.onsets[rid], n * 60.0))
        start += n
    return out


@dataclass
class ModelEval:
    label_mode: str
    seed: int
    auroc: float
    ci_lower: float
    ci_upper: float
    movement_fpr: float
    threshold: float
    fps_per_24h: float
    recall: float
    scores: np.ndarray
    result: TrainResult


def evaluate_scores(prep: PreparedCorpus, scores: np.ndarray, label_mode: str, seed: int,
                    result: TrainResult, recall_target: float = 0.8, delta_t_s: float = 60.0) -> ModelEval:
    sp = prep.splits["test"]
    ci = delong_ci(scores, sp.gold)
    thr = class_balance_threshold(scores, sp.gold)
    fpr_rows = attribute_fpr(scores, sp.gold, sp.truth, prep.attributes, thr)
    mv = next(r.fpr for r in fpr_rows if r.attribute == "movement artifact")
    util = clinical_utility(recording_scores(prep, scores), recall_target, delta_t_s)
    return ModelEval(label_mode, seed, ci.auroc, ci.lower, ci.upper, mv, thr, util.fps_per_24h,
                     util.event_recall, scores, result)


def fit_and_score(prep: PreparedCorpus, model_cfg: ModelConfig, train_cfg: TrainConfig,
                  labels: str = "weak", train_idx=None) -> ModelEval:
    data = train_data(prep, labels, train_idx)
    res = train_from_scratch(model_cfg, data, train_cfg)
    if res.checkpoint is None:
        raise RuntimeError(f"training produced no checkpoint: {res.message}")
    scores = predict_seizure_prob(res.checkpoint.to_model(), prep.splits["test"].x)
    return evaluate_scores(prep, scores, train_cfg.label_mode, train_cfg.seed, res)


# ---------------------------------------------------------------------------
# Desk-scale defaults
# ---------------------------------------------------------------------------

DESK_RATE_HZ = 16.0


def desk_model(**kw) -> ModelConfig:
    base = dict(n_layers=2, n_filters=16, state_dim=16, dropout=0.1, clip_len=int(60 * DESK_RATE_HZ))
    base.update(kw)
    return ModelConfig(**base)


def desk_train(**kw) -> TrainConfig:
    base = dict(lr0=0.004, weight_decay=0.1, dropout=0.1, pos_bias=25, epoch_cap=512, n_epochs=12,
                batch_size=32)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# Class specificity: binary vs multilabel under confounded artifacts
# ---------------------------------------------------------------------------

def class_specificity_profile(seed: int = 0, confound: float = 0.8, **kw) -> CorpusProfile:
    """Adults only, no ICU, clean notes; loud movement artifacts outnumber every other event."""
    base = dict(n_patients=80, hours_per_patient=1.0, sample_rate_hz=DESK_RATE_HZ,
                confound_strength=confound, note_fp_rate=0.0, timestamp_jitter_s=0.0,
                pediatric_fraction=0.0, icu_fraction=0.0, seizure_uv=20.0, movement_gain=1.6,
                movement_duration_s=(5.0, 30.0),
                event_rates={"seizure": 3.0, "movement": 30.0, "spike": 4.0, "slowing": 3.0}, seed=seed)
    base.update(kw)
    return CorpusProfile(**base)


@dataclass
class ClassSpecificityRun:
    seed: int
    binary: ModelEval
    multilabel: ModelEval

    @property
    def auroc_gain(self) -> float:
        return self.multilabel.auroc - self.binary.auroc

    @property
    def fps_ratio(self) -> float:
        b, m = self.binary.fps_per_24h, self.multilabel.fps_per_24h
        if m > 0:
            return b / m
        return float("inf") if b > 0 else 1.0


def class_specificity(seeds: Sequence[int] = (0, 1, 2), profile_kw: Optional[dict] = None,
                      model_kw: Optional[dict] = None, train_kw: Optional[dict] = None) -> List[ClassSpecificityRun]:
    runs = []
    for s in seeds:
        prep = prepare(generate(class_specificity_profile(seed=s, **(profile_kw or {}))), split_seed=s)
        evals = {}
        for mode in ("binary", "multilabel"):
            evals[mode] = fit_and_score(prep, desk_model(**(model_kw or {})),
                                        desk_train(seed=s, label_mode=mode, **{"n_epochs": 30, **(train_kw or {})}))
            log.info("seed %d %s auroc %.4f", s, mode, evals[mode].auroc)
        runs.append(ClassSpecificityRun(s, evals["binary"], evals["multilabel"]))
    return runs


# ---------------------------------------------------------------------------
# Scaling: many weak labels vs a small gold subset
# ---------------------------------------------------------------------------

@dataclass
class ScalingRun:
    weak: ModelEval
    gold: ModelEval
    n_weak: int
    n_gold: int
    note_fp_rate: float

    @property
    def auroc_gain(self) -> float:
        return self.weak.auroc - self.gold.auroc


def scaling(seed: int = 0, ratio: int = 10, note_fp_rate: float = 0.1, profile_kw: Optional[dict] = None,
            model_kw: Optional[dict] = None, train_kw: Optional[dict] = None) -> ScalingRun:
    """Weak labels on the whole training split vs gold labels on a 1/ratio patient subset."""
    base = dict(n_patients=50, hours_per_patient=1.0, sample_rate_hz=DESK_RATE_HZ, note_fp_rate=note_fp_rate,
                timestamp_jitter_s=5.0, confound_strength=0.3, pediatric_fraction=0.0, seizure_uv=14.0, seed=seed)
    base.update(profile_kw or {})
    prep = prepare(generate(CorpusProfile(**base)), split_seed=seed)
    tr = prep.splits["train"]
    rids = sorted(tr.n_clips_per_recording)
    rng = np.random.default_rng([seed, 7])
    n_gold_rec = max(1, int(round(len(rids) / ratio)))
    gold_rids = set(rng.choice(rids, size=n_gold_rec, replace=False).tolist())
    gold_idx = np.array([i for i, r in enumerate(tr.recording_ids) if r in gold_rids])
    mcfg = desk_model(**(model_kw or {}))
    tcfg = desk_train(seed=seed, **(train_kw or {}))
    weak = fit_and_score(prep, mcfg, tcfg, labels="weak")
    gold = fit_and_score(prep, mcfg, tcfg, labels="gold", train_idx=gold_idx)
    return ScalingRun(weak, gold, len(tr), len(gold_idx), note_fp_rate)


# ---------------------------------------------------------------------------
# Subgroups: planted pediatric disadvantage
# ---------------------------------------------------------------------------

@dataclass
class SubgroupRun:
    prep: PreparedCorpus
    eval: ModelEval
    table: ScoreTable
    report: list


def subgroups(seed: int = 0, profile_kw: Optional[dict] = None, model_kw: Optional[dict] = None,
              train_kw: Optional[dict] = None, level: float = 0.95) -> SubgroupRun:
    base = dict(n_patients=60, hours_per_patient=1.0, sample_rate_hz=DESK_RATE_HZ, pediatric_fraction=0.5,
                confound_strength=0.3, seizure_uv=20.0, pediatric_background_gain=2.5,
                event_rates={"seizure": 4.0, "spike": 4.0, "slowing": 3.0, "movement": 6.0}, seed=seed)
    base.update(profile_kw or {})
    prep = prepare(generate(CorpusProfile(**base)), split_seed=seed)
    ev = fit_and_score(prep, desk_model(**(model_kw or {})), desk_train(seed=seed, **(train_kw or {})))
    table = score_table(prep, ev.scores)
    return SubgroupRun(prep, ev, table, subgroup_report(table, default_strata(sorted(set(t for t in table.tags["seizure_type"] if t))),
                                                     level=level))
