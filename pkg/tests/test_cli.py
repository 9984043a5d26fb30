import json

import numpy as np
import pytest

from szdetect import autodiff as ad
from szdetect import report
from szdetect.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, _load_split, main
from szdetect.data import DatasetManifest, compute_norm_stats
from szdetect.model import ModelCheckpoint, ModelConfig, build_model, save_checkpoint

PROFILE = {"n_patients": 6, "hours_per_patient": 0.5, "sample_rate_hz": 16.0, "seed": 4,
           "event_rates": {"seizure": 8, "movement": 6, "spike": 3, "slowing": 3}}
TRAIN = {"model": {"n_layers": 1, "n_filters": 4, "state_dim": 4},
         "train": {"lr0": 0.004, "pos_bias": 5.0, "epoch_cap": 64, "n_epochs": 2, "batch_size": 16}}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "profile.json").write_text(json.dumps(PROFILE))
    (d / "train.json").write_text(json.dumps(TRAIN))
    assert run("synth", "--profile", d / "profile.json", "--out", d / "corpus") == EXIT_OK
    assert run("extract-labels", "--index", d / "corpus/recordings.jsonl", "--out", d / "labels") == EXIT_OK
    assert run("split", "--index", d / "corpus/recordings.jsonl", "--labels", d / "labels",
               "--gold", d / "corpus/gold.csv", "--fractions", "0.5,0.17,0.33", "--out", d / "manifest.jsonl") == 0
    assert run("train", "--manifest", d / "manifest.jsonl", "--config", d / "train.json", "--seed", 1,
               "--out", d / "run") == EXIT_OK
    assert run("evaluate", "--checkpoint", d / "run/checkpoint.ckpt", "--manifest", d / "manifest.jsonl",
               "--out", d / "eval") == EXIT_OK
    return d


def test_pipeline_artifacts(pipeline):
    d = pipeline
    assert (d / "labels/extraction_summary.txt").read_text().count("[") >= 3
    header, rows = report.read_csv(d / "eval/scores.csv")
    assert header[0] == "clip_ref" and rows
    assert all(0.0 <= float(r[3]) <= 1.0 for r in rows)
    assert (d / "eval/roc.svg").exists()
    assert "auroc = " in (d / "eval/summary.txt").read_text()
    assert (d / "eval/scores.csv").read_text().startswith("# tool: szdetect")


def test_downstream_commands(pipeline):
    d = pipeline
    scores = d / "eval/scores.csv"
    assert run("subgroups", "--scores", scores, "--out", d / "sub") == EXIT_OK
    assert {p.name for p in (d / "sub").iterdir()} >= {"subgroups.csv", "attribute_fpr.csv", "fpr_bars.svg"}
    assert run("utility", "--scores", f"m={scores}", "--out", d / "util") == EXIT_OK
    _, rows = report.read_csv(d / "util/utility.csv")
    assert len(rows) == 6
    assert run("export-embeddings", "--checkpoint", d / "run/checkpoint.ckpt", "--manifest",
               d / "manifest.jsonl", "--out", d / "emb.csv") == EXIT_OK
    header, rows = report.read_csv(d / "emb.csv")
    assert len(header) == 1 + TRAIN["model"]["n_filters"]


def test_compare_identical_scores(pipeline):
    d = pipeline
    assert run("compare", d / "eval/scores.csv", d / "eval/scores.csv", "--out", d / "cmp.csv") == EXIT_OK
    _, rows = report.read_csv(d / "cmp.csv")
    assert all(float(r[5]) == 1.0 for r in rows if r[6] == "ok")
    assert any(r[6] == "ok" for r in rows)


def test_commands_are_idempotent(pipeline):
    d = pipeline
    before = (d / "eval/scores.csv").read_bytes()
    assert run("evaluate", "--checkpoint", d / "run/checkpoint.ckpt", "--manifest", d / "manifest.jsonl",
               "--out", d / "eval2") == EXIT_OK
    assert (d / "eval2/scores.csv").read_bytes() == before
    assert run("subgroups", "--scores", d / "eval/scores.csv", "--out", d / "subA") == EXIT_OK
    assert run("subgroups", "--scores", d / "eval/scores.csv", "--out", d / "subB") == EXIT_OK
    for name in ("subgroups.csv", "attribute_fpr.csv", "fpr_bars.svg", "subgroups.txt"):
        assert (d / "subA" / name).read_bytes() == (d / "subB" / name).read_bytes()


def test_training_is_reproducible(pipeline, tmp_path):
    d = pipeline
    assert run("train", "--manifest", d / "manifest.jsonl", "--config", d / "train.json", "--seed", 1,
               "--out", tmp_path / "again") == EXIT_OK
    assert (tmp_path / "again/metric_log.csv").read_bytes() == (d / "run/metric_log.csv").read_bytes()


def _error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("szdetect-error ")
    return json.loads(err[len("szdetect-error "):])


def test_usage_error_exit_code(capsys, tmp_path):
    assert run("train", "--bogus") == EXIT_USAGE
    assert _error_line(capsys)["exit_code"] == EXIT_USAGE
    (tmp_path / "p.json").write_text(json.dumps({"n_patients": 2, "confound_strength": 3.0}))
    assert run("synth", "--profile", tmp_path / "p.json", "--out", tmp_path / "c") == EXIT_USAGE


def test_data_error_exit_code(capsys, tmp_path):
    assert run("subgroups", "--scores", tmp_path / "missing.csv", "--out", tmp_path / "o") == EXIT_DATA
    line = _error_line(capsys)
    assert line["exit_code"] == EXIT_DATA and "missing.csv" in line["message"]


def test_numeric_error_exit_code(capsys, pipeline, tmp_path):
    bad = dict(TRAIN, train=dict(TRAIN["train"], lr0=50.0, n_epochs=3))
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    code = run("train", "--manifest", pipeline / "manifest.jsonl", "--config", tmp_path / "bad.json",
               "--out", tmp_path / "bad")
    assert code == EXIT_NUMERIC
    assert _error_line(capsys)["exit_code"] == EXIT_NUMERIC


# -- an untrained model scores balanced data at chance ----------------------------

@pytest.fixture(scope="module")
def balanced(tmp_path_factory):
    d = tmp_path_factory.mktemp("balanced")
    prof = {"n_patients": 12, "hours_per_patient": 1.0, "sample_rate_hz": 16.0, "seed": 2,
            "event_rates": {"seizure": 30, "movement": 10, "spike": 5, "slowing": 5}}
    (d / "profile.json").write_text(json.dumps(prof))
    assert run("synth", "--profile", d / "profile.json", "--out", d / "corpus") == EXIT_OK
    assert run("extract-labels", "--index", d / "corpus/recordings.jsonl", "--out", d / "labels") == EXIT_OK
    assert run("split", "--index", d / "corpus/recordings.jsonl", "--labels", d / "labels",
               "--gold", d / "corpus/gold.csv", "--fractions", "0.5,0,0.5", "--out", d / "m.jsonl") == EXIT_OK
    return d


def test_untrained_model_is_near_chance(balanced):
    # single random nets lean on signal power with a random sign; the seed average is at chance
    d = balanced
    x_tr, _ = _load_split(DatasetManifest.read(d / "m.jsonl"), "train")
    norm = compute_norm_stats([x_tr]).to_dict()
    aucs = []
    for seed in range(16):
        cfg = ModelConfig(n_layers=2, n_filters=16, state_dim=16, clip_len=x_tr.shape[1])
        with ad.precision(32):
            ck = ModelCheckpoint.from_model(build_model(cfg, seed), norm=norm)
        save_checkpoint(d / f"r{seed}.ckpt", ck)
        assert run("evaluate", "--checkpoint", d / f"r{seed}.ckpt", "--manifest", d / "m.jsonl",
                   "--out", d / f"e{seed}") == EXIT_OK
        _, rows = report.read_csv(d / f"e{seed}/scores.csv")
        gold = np.array([int(r[4]) for r in rows])
        assert 0.4 <= gold.mean() <= 0.6
        text = (d / f"e{seed}/summary.txt").read_text()
        aucs.append(float(text.split("auroc = ")[1].split()[0]))
    assert abs(np.mean(aucs) - 0.5) <= 0.05
