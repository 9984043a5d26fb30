"""Static report artifacts: CSV tables, SVG figures and a plain-text summary."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

import matplotlib

matplotlib.use("Agg")
# fixed salt keeps SVG element ids identical across runs
matplotlib.rcParams["svg.hashsalt"] = "szdetect"
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import AttributeFpr, SubgroupRow, UtilityResult, roc_curve  # noqa: E402

TOOL_VERSION = "0.1.0"


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(config: Mapping) -> str:
    return digest_bytes(json.dumps(config, sort_keys=True, default=str).encode())


def provenance_lines(config: Optional[Mapping] = None, inputs: Optional[Mapping[str, str]] = None,
                     seed: Optional[int] = None) -> list:
    """``# key: value`` header lines naming the tool version, config and input digests."""
    lines = [f"# tool: szdetect {TOOL_VERSION}"]
    if config is not None:
        lines.append(f"# config_digest: {config_digest(config)}")
    if seed is not None:
        lines.append(f"# seed: {seed}")
    for name, dig in sorted((inputs or {}).items()):
        lines.append(f"# input {name}: {dig}")
    return lines


def write_csv(path, header: Sequence[str], rows, provenance: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in provenance:
            fh.write(line + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def read_csv(path):
    """Rows of a CSV written by :func:`write_csv`, skipping provenance lines."""
    with open(path, newline="") as fh:
        lines = [l for l in fh if not l.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    return header, [r for r in reader if r]


def _fmt(x: float, nd: int = 4) -> str:
    return "nan" if x is None or not np.isfinite(x) else f"{x:.{nd}f}"


# ---------------------------------------------------------------------------
# Subgroup table and FPR bars
# ---------------------------------------------------------------------------

def subgroup_table_rows(rows: Sequence[SubgroupRow]):
    for r in rows:
        yield [r.name, r.n_pos, r.n_neg, _fmt(r.auroc), _fmt(r.lower), _fmt(r.upper), r.status]


SUBGROUP_HEADER = ["subgroup", "n_pos", "n_neg", "auroc", "ci_lower", "ci_upper", "status"]


def format_subgroup_table(rows: Sequence[SubgroupRow]) -> str:
    out = [f"{'subgroup':<32} {'pos':>5} {'neg':>6} {'AUROC':>7}  95% CI            status"]
    for r in rows:
        ci = f"[{_fmt(r.lower, 3)}, {_fmt(r.upper, 3)}]"
        out.append(f"{r.name:<32} {r.n_pos:>5} {r.n_neg:>6} {_fmt(r.auroc, 3):>7}  {ci:<17} {r.status}")
    return "\n".join(out)


def plot_fpr_bars(path, fprs: Mapping[str, Sequence[AttributeFpr]], attributes: Optional[Sequence[str]] = None,
                  title: str = "False positive rate by clip attribute") -> None:
    """Grouped bars: one group per attribute, one bar per model."""
    models = list(fprs)
    if attributes is None:
        first = fprs[models[0]]
        attributes = [r.attribute for r in first if r.n_negatives > 0]
    fig, ax = plt.subplots(figsize=(max(6.0, 0.7 * len(attributes) + 2), 4.0))
    width = 0.8 / max(1, len(models))
    x = np.arange(len(attributes))
    for k, m in enumerate(models):
        lookup = {r.attribute: r.fpr for r in fprs[m]}
        vals = [lookup.get(a, np.nan) for a in attributes]
        ax.bar(x + k * width - 0.4 + width / 2, np.nan_to_num(vals), width, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels(attributes, rotation=40, ha="right", fontsize=8)
    ax.set_ylabel("FPR")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_roc(path, curves: Mapping[str, tuple], title: str = "ROC") -> None:
    """``curves`` maps a label to ``(scores, gold)``."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for name, (scores, gold) in curves.items():
        fpr, tpr, _ = roc_curve(scores, gold)
        ax.plot(fpr, tpr, label=name)
    ax.plot([0, 1], [0, 1], color="grey", lw=0.8, ls="--")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title)
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# Clinical utility grid
# ---------------------------------------------------------------------------

UTILITY_HEADER = ["model", "recall_target", "delta_t_s", "threshold", "event_recall", "false_positives",
                  "hours", "fps_per_24h", "early_detections", "target_met"]


def utility_rows(grids: Mapping[str, Sequence[UtilityResult]]):
    for model, results in grids.items():
        for u in results:
            yield [model, u.recall_target, u.delta_t_s, repr(u.threshold), _fmt(u.event_recall),
                   u.false_positives, _fmt(u.hours, 3), _fmt(u.fps_per_24h, 2), u.early_detections,
                   int(u.target_met)]


def plot_utility_grid(path, grids: Mapping[str, Sequence[UtilityResult]]) -> None:
    """FPs/24hr per (recall, delta_t) setting, one bar per model."""
    models = list(grids)
    settings = [(u.recall_target, u.delta_t_s) for u in grids[models[0]]]
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    width = 0.8 / max(1, len(models))
    x = np.arange(len(settings))
    for k, m in enumerate(models):
        vals = [u.fps_per_24h for u in grids[m]]
        ax.bar(x + k * width - 0.4 + width / 2, vals, width, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels([f"recall {r:g}\nΔt {d:g}s" for r, d in settings], fontsize=8)
    ax.set_ylabel("false positives per 24 h")
    ax.set_title("Clinical utility")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# Summary
# ---------------------------------------------------------------------------

def write_summary(path, sections: Mapping[str, object], provenance: Sequence[str] = ()) -> None:
    """Structured text: ``[section]`` headers followed by ``key = value`` lines or a preformatted block."""
    out = list(provenance)
    for name, body in sections.items():
        out.append(f"[{name}]")
        if isinstance(body, Mapping):
            for k, v in body.items():
                out.append(f"{k} = {v}")
        else:
            out.append(str(body))
        out.append("")
    Path(path).write_text("\n".join(out))
