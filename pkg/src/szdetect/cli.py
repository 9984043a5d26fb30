"""Batch pipeline entry point: ``szdetect <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.  Failures also print one JSON line prefixed with
``szdetect-error`` on standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import report
from .data import (CLIP_LEN_S, DataError, DatasetManifest, EegRecording, clip_array, clip_ref, compute_norm_stats,
                   file_digest, normalize_clip, parse_clip_ref, read_edf, read_native, split_by_patient,
                   write_native, NormStats)
from .metrics import (MetricError, RecordingScores, ScoreTable, attribute_fpr, class_balance_threshold,
                      default_strata, delong_ci, delong_paired_test, subgroup_report, utility_grid,
                      RECALL_TARGETS, DELAY_TOLERANCES_S)
from .model import (CheckpointError, ConfigError, ModelCheckpoint, ModelConfig, export_embeddings,
                    load_checkpoint, predict_seizure_prob, save_checkpoint)
from .notes import AttributeTable, NotesError, assign_labels, parse_notes_file, write_label_matrix, read_label_matrix
from .ssm import StabilityError
from .synth import CorpusProfile, ProfileError, generate, write_corpus
from .train import (NumericalError, TrainConfig, TrainData, grid_search, train_from_scratch, write_grid_table,
                    write_metric_log)

log = logging.getLogger("szdetect")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ROOT_ENV = "SZDETECT_DATA_ROOT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _path(p: str) -> Path:
    """Relative paths that do not exist resolve against ``$SZDETECT_DATA_ROOT`` when set."""
    path = Path(p)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not path.is_absolute() and not path.exists():
        return Path(root) / path
    return path


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    return path


def _load_json(path: Path, what: str) -> dict:
    _require(path, what)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path} is not valid JSON: {exc}") from exc


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


# ---------------------------------------------------------------------------
# Recording index
# ---------------------------------------------------------------------------

def _read_index(path: Path) -> List[dict]:
    _require(path, "recording index")
    rows = [json.loads(l) for l in path.read_text().splitlines() if l.strip() and not l.startswith("#")]
    for r in rows:
        for key in ("recording_id", "patient_id", "path"):
            if key not in r:
                raise DataError(f"{path}: index row missing {key!r}")
    return rows


def _write_index(path: Path, rows: List[dict]) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _n_clips(row: dict) -> int:
    return int(row["n_samples"] // int(round(CLIP_LEN_S * row["sample_rate_hz"])))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.profile:
        d = _load_json(_path(args.profile), "profile")
    else:
        d = json.loads(_resource_text("demo_profile.json"))
    if args.seed is not None:
        d["seed"] = args.seed
    profile = CorpusProfile.from_dict(d)
    profile.validate()
    corpus = generate(profile)
    out = write_corpus(corpus, args.out)
    print(f"wrote {len(corpus.recordings)} recordings to {out}")
    return EXIT_OK


def _resource_text(name: str) -> str:
    from importlib import resources
    return resources.files("szdetect.resources").joinpath(name).read_text("utf-8")


def cmd_ingest(args) -> int:
    out = Path(args.out)
    inputs = [_require(_path(p), "input recording") for p in args.inputs]
    (out / "recordings").mkdir(parents=True, exist_ok=True)
    meta = dict(kv.split("=", 1) for kv in args.meta) if args.meta else {}
    rows = []
    for p in inputs:
        if p.suffix.lower() == ".edf":
            rec = read_edf(p, target_rate=args.target_rate, patient_id=args.patient_id, metadata=meta)
        else:
            rec = read_native(p)
            if meta:
                rec.metadata = {**rec.metadata, **meta}
        dest = out / "recordings" / f"{rec.recording_id}.sznat"
        digest = write_native(dest, rec)
        row = {"recording_id": rec.recording_id, "patient_id": rec.patient_id,
               "path": f"recordings/{rec.recording_id}.sznat", "sample_rate_hz": rec.sample_rate_hz,
               "n_samples": rec.n_samples, "metadata": rec.metadata, "digest": digest,
               "source_digest": file_digest(p)}
        if args.notes_dir:
            notes = _path(args.notes_dir) / f"{rec.recording_id}.csv"
            if notes.exists():
                row["notes"] = str(notes.resolve())
        rows.append(row)
    _write_index(out / "recordings.jsonl", rows)
    print(f"ingested {len(rows)} recordings into {out}")
    return EXIT_OK


def cmd_extract_labels(args) -> int:
    index_path = _path(args.index)
    rows = _read_index(index_path)
    table = AttributeTable.load(_require(_path(args.table), "attribute table")) if args.table else AttributeTable.default()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = {n: 0 for n in table.names}
    rejects, out_of_range, n_notes, n_clips_total = [], 0, 0, 0
    for r in rows:
        n = _n_clips(r)
        n_clips_total += n
        notes_rel = r.get("notes")
        if notes_rel is None:
            log.warning("%s has no notes file; all clips unlabeled", r["recording_id"])
            parsed_notes, parsed_rejects = [], []
        else:
            parsed = parse_notes_file(_require(index_path.parent / notes_rel, "notes file"))
            parsed_notes, parsed_rejects = parsed.notes, parsed.rejects
        labels = assign_labels(parsed_notes, n, table)
        write_label_matrix(out / f"{r['recording_id']}.csv", labels)
        n_notes += len(parsed_notes)
        out_of_range += labels.out_of_range
        for k, v in labels.match_counts.items():
            counts[k] += v
        rejects += [(r["recording_id"], j.line, j.reason) for j in parsed_rejects]
    prov = report.provenance_lines({"table": table.names}, {"index": report.digest_file(index_path)})
    report.write_summary(out / "extraction_summary.txt", {
        "totals": {"recordings": len(rows), "clips": n_clips_total, "notes": n_notes,
                   "rejected_rows": len(rejects), "out_of_range_notes": out_of_range},
        "match_counts": counts,
        "rejects": "\n".join(f"{rid} line {ln}: {why}" for rid, ln, why in rejects) or "(none)",
    }, prov)
    print(f"labels for {len(rows)} recordings written to {out}")
    return EXIT_OK


def _read_gold(path: Path) -> Dict[str, tuple]:
    header, rows = report.read_csv(_require(path, "gold label file"))
    cols = {h: i for i, h in enumerate(header)}
    if "clip_ref" not in cols or "seizure" not in cols:
        raise DataError(f"{path}: gold file needs clip_ref and seizure columns")
    ti = cols.get("seizure_type")
    return {r[cols["clip_ref"]]: (int(r[cols["seizure"]]), r[ti] if ti is not None else "") for r in rows}


def cmd_split(args) -> int:
    index_path = _path(args.index)
    rows = _read_index(index_path)
    fractions = _floats(args.fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or sum(fractions) <= 0:
        raise ConfigError("--fractions needs three non-negative numbers")
    seed = 0 if args.seed is None else args.seed
    manifest = split_by_patient([r["patient_id"] for r in rows], fractions, seed)
    labels_dir = _path(args.labels) if args.labels else None
    gold = _read_gold(_path(args.gold)) if args.gold else {}
    attributes = None
    for r in rows:
        split = manifest.split_of(r["patient_id"])
        mat = None
        if labels_dir is not None:
            lab = read_label_matrix(_require(labels_dir / f"{r['recording_id']}.csv", "label matrix"))
            attributes = attributes or lab.attributes
            mat = lab.matrix
        for i in range(_n_clips(r)):
            ref = clip_ref(r["recording_id"], i)
            rec = {"clip_ref": ref, "recording_id": r["recording_id"], "patient_id": r["patient_id"],
                   "clip_index": i, "split": split, "tags": r.get("metadata", {})}
            if mat is not None:
                rec["labels"] = [int(v) for v in mat[i]] if i < len(mat) else [0] * len(attributes)
            if ref in gold:
                rec["gold"], rec["seizure_type"] = gold[ref]
            manifest.records.append(rec)
    manifest.info.update({
        "index": str(index_path.resolve()), "attributes": attributes,
        "content_digests": {r["recording_id"]: r.get("digest", "") for r in rows},
        "counts": {s: len(manifest.patients(s)) for s in ("train", "val", "test")},
    })
    manifest.write(args.out)
    print(f"manifest with {len(manifest.records)} clips written to {args.out}")
    return EXIT_OK


def _load_split(manifest: DatasetManifest, split: str):
    """Raw clips, records and recordings for one split, in manifest order."""
    index_path = Path(manifest.info["index"])
    rows = {r["recording_id"]: r for r in _read_index(index_path)}
    recs = manifest.clips(split)
    if not recs:
        raise DataError(f"manifest has no clips in split {split!r}")
    cache: Dict[str, np.ndarray] = {}
    xs = []
    for rec in recs:
        rid = rec["recording_id"]
        if rid not in cache:
            row = rows.get(rid)
            if row is None:
                raise DataError(f"recording {rid} missing from index {index_path}")
            path = index_path.parent / row["path"]
            if manifest.info.get("content_digests", {}).get(rid) and \
                    file_digest(path) != manifest.info["content_digests"][rid]:
                raise DataError(f"{path}: content digest differs from the manifest")
            cache[rid] = clip_array(read_native(path))
        xs.append(cache[rid][rec["clip_index"]])
    return np.stack(xs), recs


def _train_config(d: dict, args) -> TrainConfig:
    cfg = TrainConfig.from_dict({k: v for k, v in d.items()})
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.label_mode:
        cfg = replace(cfg, label_mode=args.label_mode.replace("subset=", "subset:"))
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def cmd_train(args) -> int:
    if args.config:
        cfg_d = _load_json(_path(args.config), "training config")
    else:
        cfg_d = json.loads(_resource_text("demo_train.json"))
    unknown = set(cfg_d) - {"model", "train", "grid"}
    if unknown:
        raise ConfigError(f"unknown training config sections: {sorted(unknown)}")
    tcfg = _train_config(cfg_d.get("train", {}), args)
    mcfg = ModelConfig.from_dict(cfg_d.get("model", {}))
    manifest_path = _path(args.manifest)
    manifest = DatasetManifest.read(_require(manifest_path, "manifest"))
    attributes = manifest.info.get("attributes")
    if not attributes:
        raise DataError("manifest carries no weak labels; run split with --labels")
    x_tr, r_tr = _load_split(manifest, "train")
    x_va, r_va = _load_split(manifest, "val")
    if any("gold" not in r for r in r_va):
        raise DataError("validation clips need gold labels; run split with --gold")
    stats = compute_norm_stats([x_tr])
    mcfg = replace(mcfg, clip_len=x_tr.shape[1], input_channels=x_tr.shape[2])
    data = TrainData(normalize_clip(x_tr, stats), np.array([r["labels"] for r in r_tr], dtype=np.uint8),
                     normalize_clip(x_va, stats), np.array([r["gold"] for r in r_va]), list(attributes),
                     manifest.digest())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if "grid" in cfg_d:
        best, rows, results = grid_search(tcfg, cfg_d["grid"], lambda c: train_from_scratch(mcfg, data, c))
        write_grid_table(out / "grid.csv", rows)
        if best is None:
            raise NumericalError("every grid point failed")
        win = next(r.index for r in rows if r.status == "ok" and (r.lr0, r.weight_decay, r.dropout)
                   == (best.lr0, best.weight_decay, best.dropout))
        result, tcfg = results[win], best
    else:
        result = train_from_scratch(mcfg, data, tcfg)
    write_metric_log(out / "metric_log.csv", result.log)
    if result.status != "ok" or result.checkpoint is None:
        raise NumericalError(result.message or "training produced no checkpoint")
    ck = result.checkpoint
    ck.metadata.update({"norm": stats.to_dict(), "attributes": list(attributes),
                        "label_mode": tcfg.label_mode, "train_config": asdict(tcfg),
                        "manifest_digest": manifest.digest()})
    save_checkpoint(out / "checkpoint.ckpt", ck)
    print(f"best val AUROC {result.best_val_auroc:.4f}; checkpoint in {out}")
    return EXIT_OK


def _checkpoint_inputs(args):
    ck = load_checkpoint(_require(_path(args.checkpoint), "checkpoint"))
    if "norm" not in ck.metadata:
        raise CheckpointError("checkpoint lacks normalization statistics")
    manifest = DatasetManifest.read(_require(_path(args.manifest), "manifest"))
    x, recs = _load_split(manifest, args.split)
    x = normalize_clip(x, NormStats.from_dict(ck.metadata["norm"]))
    return ck, manifest, x, recs


SCORE_HEADER = ["clip_ref", "recording_id", "clip_index", "score", "gold", "seizure_type", "age_group", "icu",
                "hospital", "attributes"]


def cmd_evaluate(args) -> int:
    ck, manifest, x, recs = _checkpoint_inputs(args)
    scores = predict_seizure_prob(ck.to_model(), x)
    attrs = manifest.info.get("attributes") or []
    rows = []
    for r, s in zip(recs, scores):
        names = [a for a, v in zip(attrs, r.get("labels", [])) if v]
        t = r.get("tags", {})
        rows.append([r["clip_ref"], r["recording_id"], r["clip_index"], repr(float(s)), r.get("gold", ""),
                     r.get("seizure_type", ""), t.get("age_group", ""), t.get("icu", ""), t.get("hospital", ""),
                     "|".join(names)])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = report.provenance_lines({"split": args.split}, {"checkpoint": report.digest_file(_path(args.checkpoint)),
                                                           "manifest": manifest.digest()})
    report.write_csv(out / "scores.csv", SCORE_HEADER, rows, prov)
    summary = {"clips": len(rows)}
    gold = [r.get("gold") for r in recs]
    if all(g is not None for g in gold):
        ci = delong_ci(scores, np.asarray(gold))
        summary.update({"auroc": f"{ci.auroc:.6f}", "ci_lower": f"{ci.lower:.6f}", "ci_upper": f"{ci.upper:.6f}",
                        "positives": int(np.sum(gold))})
        report.plot_roc(out / "roc.svg", {ck.metadata.get("label_mode", "model"): (scores, np.asarray(gold))})
        print(f"AUROC {ci.auroc:.4f} [{ci.lower:.4f}, {ci.upper:.4f}]")
    report.write_summary(out / "summary.txt", {"evaluation": summary}, prov)
    return EXIT_OK


def _read_scores(path: Path) -> ScoreTable:
    header, rows = report.read_csv(_require(path, "scores file"))
    if header != SCORE_HEADER:
        raise DataError(f"{path}: unexpected score columns {header}")
    if any(r[4] == "" for r in rows):
        raise DataError(f"{path}: every clip needs a gold label")
    names = sorted({a for r in rows for a in r[9].split("|") if a})
    attrs = np.array([[a in r[9].split("|") for a in names] for r in rows], dtype=bool).reshape(len(rows), len(names))
    tags = {"recording_id": [r[1] for r in rows], "seizure_type": [r[5] for r in rows],
            "age_group": [r[6] for r in rows], "icu": [r[7] for r in rows], "hospital": [r[8] for r in rows],
            "clip_index": [int(r[2]) for r in rows]}
    return ScoreTable([r[0] for r in rows], np.array([float(r[3]) for r in rows]), np.array([int(r[4]) for r in rows]),
                      tags, attrs, names)


def _strata(table: ScoreTable):
    return default_strata(sorted({t for t in table.tags["seizure_type"] if t}))


def cmd_subgroups(args) -> int:
    path = _path(args.scores)
    table = _read_scores(path)
    rows = subgroup_report(table, _strata(table), level=args.level, min_positives=args.min_positives)
    thr = class_balance_threshold(table.scores, table.gold)
    fprs = attribute_fpr(table.scores, table.gold, table.attributes, table.attribute_names, thr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = report.provenance_lines({"level": args.level}, {"scores": report.digest_file(path)})
    report.write_csv(out / "subgroups.csv", report.SUBGROUP_HEADER, report.subgroup_table_rows(rows), prov)
    report.write_csv(out / "attribute_fpr.csv", ["attribute", "n_negatives", "false_positives", "fpr", "flagged"],
                     [[f.attribute, f.n_negatives, f.false_positives, f"{f.fpr:.6f}", int(f.flagged)] for f in fprs],
                     prov)
    report.plot_fpr_bars(out / "fpr_bars.svg", {args.name: fprs})
    text = report.format_subgroup_table(rows)
    report.write_summary(out / "subgroups.txt", {"threshold": {"class_balance": repr(thr)}, "subgroups": text}, prov)
    print(text)
    return EXIT_OK


def _recording_scores(table: ScoreTable) -> List[RecordingScores]:
    by_rec: Dict[str, list] = {}
    for i, rid in enumerate(table.tags["recording_id"]):
        by_rec.setdefault(rid, []).append(i)
    recs = []
    for rid in sorted(by_rec):
        idx = sorted(by_rec[rid], key=lambda i: table.tags["clip_index"][i])
        clip_idx = [table.tags["clip_index"][i] for i in idx]
        if clip_idx != list(range(len(idx))):
            raise DataError(f"{rid}: utility needs every clip of the recording in order")
        onsets = [CLIP_LEN_S * k for k, i in enumerate(idx) if table.gold[i] == 1]
        recs.append(RecordingScores(rid, table.scores[idx], onsets, len(idx) * CLIP_LEN_S))
    return recs


def cmd_utility(args) -> int:
    grids = {}
    inputs = {}
    for spec in args.scores:
        name, _, p = spec.rpartition("=")
        path = _path(p)
        inputs[name or path.stem] = report.digest_file(_require(path, "scores file"))
        grids[name or path.stem] = utility_grid(_recording_scores(_read_scores(path)), _floats(args.recalls),
                                                _floats(args.deltas))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prov = report.provenance_lines({"recalls": args.recalls, "deltas": args.deltas}, inputs)
    report.write_csv(out / "utility.csv", report.UTILITY_HEADER, report.utility_rows(grids), prov)
    report.plot_utility_grid(out / "utility.svg", grids)
    for name, g in grids.items():
        for u in g:
            print(f"{name} recall>={u.recall_target:g} dt={u.delta_t_s:g}s: {u.fps_per_24h:.2f} FPs/24h")
    return EXIT_OK


def cmd_compare(args) -> int:
    pa, pb = _path(args.a), _path(args.b)
    a, b = _read_scores(pa), _read_scores(pb)
    if a.refs != b.refs or not np.array_equal(a.gold, b.gold):
        raise DataError("score files must cover the same clips in the same order with the same gold labels")
    rows = []
    for st in _strata(a):
        m = st.mask(a)
        sa, sb = a.subset(m), b.subset(m)
        n_pos = int(sa.gold.sum())
        if n_pos < 2 or len(sa) - n_pos < 2:
            rows.append([st.name, n_pos, len(sa) - n_pos, "nan", "nan", "nan", "not_computable"])
            continue
        p = delong_paired_test(sa.scores, sb.scores, sa.gold)
        rows.append([st.name, n_pos, len(sa) - n_pos, f"{delong_ci(sa.scores, sa.gold).auroc:.6f}",
                     f"{delong_ci(sb.scores, sb.gold).auroc:.6f}", repr(float(p)), "ok"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    prov = report.provenance_lines(None, {"a": report.digest_file(pa), "b": report.digest_file(pb)})
    report.write_csv(out, ["subgroup", "n_pos", "n_neg", "auroc_a", "auroc_b", "p_value", "status"], rows, prov)
    for r in rows:
        print(f"{r[0]:<32} {r[3]:>10} {r[4]:>10}  p={r[5]}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    ck, manifest, x, recs = _checkpoint_inputs(args)
    emb = export_embeddings(ck.to_model(), x)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    prov = report.provenance_lines({"split": args.split}, {"checkpoint": report.digest_file(_path(args.checkpoint)),
                                                           "manifest": manifest.digest()})
    report.write_csv(out, ["clip_ref"] + [f"f{i}" for i in range(emb.shape[1])],
                     ([r["clip_ref"], *[repr(float(v)) for v in e]] for r, e in zip(recs, emb)), prov)
    print(f"{emb.shape[0]} embeddings of width {emb.shape[1]} written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and error mapping
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="szdetect", description="Seizure onset detection pipeline on weak workflow-note labels.")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--seed", type=int, default=None, help="seed for all randomness in this stage")
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic corpus from a profile (JSON); default is the tiny demo")
    sp.add_argument("--profile", help="CorpusProfile JSON file")
    sp.add_argument("--out", required=True, help="output corpus directory")

    sp = add("ingest", cmd_ingest, "convert EDF or native recordings into native containers plus an index")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out", required=True)
    sp.add_argument("--target-rate", type=float, default=200.0)
    sp.add_argument("--patient-id", help="patient id for EDF inputs (default: header field)")
    sp.add_argument("--notes-dir", help="directory of <recording_id>.csv notes files")
    sp.add_argument("--meta", nargs="*", help="key=value metadata tags, e.g. age_group=adult icu=0")

    sp = add("extract-labels", cmd_extract_labels, "turn workflow notes into per-clip attribute label matrices")
    sp.add_argument("--index", required=True, help="recordings.jsonl")
    sp.add_argument("--table", help="attribute table (default: shipped table)")
    sp.add_argument("--out", required=True)

    sp = add("split", cmd_split, "assign patients to train/val/test and write a dataset manifest")
    sp.add_argument("--index", required=True)
    sp.add_argument("--labels", help="directory from extract-labels")
    sp.add_argument("--gold", help="gold label CSV (clip_ref, seizure, seizure_type)")
    sp.add_argument("--fractions", default="0.5,0.1,0.4")
    sp.add_argument("--out", required=True, help="manifest JSONL path")

    sp = add("train", cmd_train, "train a model; JSON config with 'model', 'train' and optional 'grid' sections")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--config", help="training config JSON (default: the shipped demo config)")
    sp.add_argument("--label-mode", help="binary | multilabel | subset=<attr>,<attr>")
    sp.add_argument("--out", required=True)

    for name, fn, help_ in (("evaluate", cmd_evaluate, "score a split and report AUROC with a DeLong CI"),
                            ("export-embeddings", cmd_export_embeddings, "write pooled trunk features per clip")):
        sp = add(name, fn, help_)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--split", default="test", choices=["train", "val", "test"])
        sp.add_argument("--out", required=True)

    sp = add("subgroups", cmd_subgroups, "subgroup AUROC table and per-attribute FPR bars from a scores file")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--name", default="model")
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--min-positives", type=int, default=5)
    sp.add_argument("--out", required=True)

    sp = add("utility", cmd_utility, "false positives per 24 h over a recall x delay-tolerance grid")
    sp.add_argument("--scores", required=True, nargs="+", help="[name=]scores.csv, one per model")
    sp.add_argument("--recalls", default=",".join(map(str, RECALL_TARGETS)))
    sp.add_argument("--deltas", default=",".join(f"{d:g}" for d in DELAY_TOLERANCES_S))
    sp.add_argument("--out", required=True)

    sp = add("compare", cmd_compare, "paired DeLong p-values between two score files, per subgroup")
    sp.add_argument("a")
    sp.add_argument("b")
    sp.add_argument("--out", required=True)
    return p


def _error(code: int, exc: BaseException) -> int:
    line = {"exit_code": code, "kind": type(exc).__name__, "message": str(exc)}
    print("szdetect-error " + json.dumps(line, sort_keys=True), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _error(EXIT_USAGE, exc)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError, ProfileError) as exc:
        return _error(EXIT_USAGE, exc)
    except (NumericalError, StabilityError, FloatingPointError) as exc:
        return _error(EXIT_NUMERIC, exc)
    except (DataError, NotesError, CheckpointError, MetricError, OSError) as exc:
        return _error(EXIT_DATA, exc)
    except ValueError as exc:
        return _error(EXIT_USAGE, exc)


if __name__ == "__main__":
    sys.exit(main())
