"""Acceptance criteria 1-8.  Each test prints one ``criterion N: PASS|FAIL`` line.

The experiment criteria (5-7) train several desk-scale models and take
minutes; the property criteria run in seconds.
"""

import math
import time

import numpy as np
import pytest
from scipy.stats import norm

from szdetect import autodiff as ad
from szdetect import experiments as E
from szdetect import report
from szdetect.data import STANDARD_CHANNELS, read_edf, write_edf
from szdetect.metrics import (attribute_fpr, auroc, class_balance_threshold, delong_ci, delong_paired_test,
                              utility_grid)
from szdetect.model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from szdetect.notes import AttributeTable, WorkflowNote, assign_labels, match_attributes
from szdetect.ssm import init_raw_params, materialize_kernel, ssm_convolve, ssm_scan, stabilize
from szdetect.train import TrainConfig, TrainData, train_from_scratch, write_metric_log

from test_metrics import HAND_SCORED, _scenario, brute_auroc, permutation_p
from test_notes import VECTORS


@pytest.fixture
def verdict(capsys):
    def report_line(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok
    return report_line


# -- 1. recurrent and convolutional views agree --------------------------------

def test_criterion_1_ssm_equivalence(verdict):
    rng = np.random.default_rng(20240601)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(200):
        d = int(rng.integers(1, 65))
        L = int(rng.choice([16, 128, 512, 1024, 2048, 4096]))
        raw = init_raw_params(d, rng)
        raw.mag_logit = rng.normal(size=d) * 3
        raw.phase = rng.uniform(-np.pi, np.pi, size=d)
        p = stabilize(raw)
        u = rng.normal(size=L)
        y_conv = ssm_convolve(materialize_kernel(p, L), u, p.D, "fft")
        worst = max(worst, float(np.max(np.abs(y_conv - ssm_scan(p, u)))))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-8 and secs < 120
    assert verdict(1, ok, f"max |recurrent - convolutional| = {worst:.2e} over 200 systems, {secs:.1f} s")


# -- 2. every gradient entry matches finite differences ------------------------

def test_criterion_2_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    worst, n_checked = 0.0, 0
    with ad.precision(64):
        for head, k in (("softmax_binary", 2), ("multilabel_sigmoid", 3)):
            cfg = ModelConfig(n_layers=2, n_filters=4, state_dim=4, input_channels=3, clip_len=32,
                              n_classes=k, head_mode=head, dropout=0.0)
            m = build_model(cfg, 11)
            rng = np.random.default_rng(12)
            x = rng.normal(size=(2, 32, 3))
            y = np.array([0, 1]) if k == 2 else rng.integers(0, 2, size=(2, k))
            m.zero_grad()
            ad.backward(m.loss(m.forward(x), y))
            h = 1e-5
            for name, t in m.named_parameters():
                flat, grad = t.data.reshape(-1), t.grad.reshape(-1)
                for i in range(flat.size):
                    old = flat[i]
                    flat[i] = old + h
                    fp = m.loss(m.forward(x), y).item()
                    flat[i] = old - h
                    fm = m.loss(m.forward(x), y).item()
                    flat[i] = old
                    num = (fp - fm) / (2 * h)
                    rel = abs(grad[i] - num) / max(abs(grad[i]), abs(num), 1e-6)
                    worst = max(worst, rel)
                    n_checked += 1
    secs = time.perf_counter() - t0
    ok = worst < 1e-4 and secs < 120
    assert verdict(2, ok, f"max rel err {worst:.2e} over {n_checked} parameter entries, {secs:.1f} s")


# -- 3. metric oracles ---------------------------------------------------------

def test_criterion_3_metric_oracles(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    exact = True
    for n in (2, 5, 17, 64, 200):
        for _ in range(5):
            y = np.r_[1, 0, rng.integers(0, 2, size=n - 2)]
            s = np.round(rng.normal(size=n) + y, 1)  # rounding forces ties
            exact &= auroc(s, y) == brute_auroc(s, y)
    rng = np.random.default_rng(2024)
    true_auc = norm.cdf(1.0 / math.sqrt(2))
    hits = 0
    for _ in range(1000):
        y = np.r_[np.ones(50, int), np.zeros(50, int)]
        ci = delong_ci(rng.normal(size=100) + y, y)
        hits += ci.lower <= true_auc <= ci.upper
    coverage = hits / 1000
    gaps = []
    for seed in (1, 3):
        r = np.random.default_rng(seed)
        y = np.r_[np.ones(20, int), np.zeros(20, int)]
        z = r.normal(size=40) + y
        a, b = z + r.normal(size=40) * 0.7, z + r.normal(size=40) * 0.7
        gaps.append(abs(delong_paired_test(a, b, y) - permutation_p(a, b, y)))
    grid_ok = True
    for u in utility_grid(_scenario()):
        thr, rec, fp, per24, early, met = HAND_SCORED[(u.recall_target, u.delta_t_s)]
        grid_ok &= (u.threshold == thr and math.isclose(u.event_recall, rec) and u.false_positives == fp
                    and math.isclose(u.fps_per_24h, per24) and u.early_detections == early
                    and u.target_met == met)
    secs = time.perf_counter() - t0
    ok = exact and 0.93 <= coverage <= 0.97 and max(gaps) <= 0.03 and grid_ok and secs < 600
    assert verdict(3, ok, f"brute-force AUROC exact={exact}, DeLong coverage {coverage:.3f}, "
                          f"max |p - permutation p| {max(gaps):.3f}, utility grid 6/6 match={grid_ok}, {secs:.0f} s")


# -- 4. extractor conformance --------------------------------------------------

def test_criterion_4_extractor(verdict):
    table = AttributeTable.default()
    vectors = all(name in match_attributes(pos, table) and name not in match_attributes(neg, table)
                  for name, (pos, neg) in VECTORS.items())
    named = (match_attributes("sz", table) == {"seizure"}
             and "movement artifact" in match_attributes("mvt", table)
             and match_attributes("xx", table) == {"unknown abnormality"})
    samples = ["Pt had SZ", "EYES CLOSED", "hv Start", "mvt", "LLL spike", "Diffuse Slowing"]
    case = all(match_attributes(s.upper(), table) == match_attributes(s.lower(), table) == match_attributes(s, table)
               for s in samples)
    lab = assign_labels([WorkflowNote(125.0, "sz"), WorkflowNote(60.0, "spike"), WorkflowNote(59.999, "slowing")],
                        4, table)
    onset_rule = (lab.seizure_onset.tolist() == [0, 0, 1, 0]
                  and lab.matrix[1, table.index("spike")] == 1 and lab.matrix[0, table.index("slowing")] == 1)
    ok = vectors and named and case and onset_rule and len(VECTORS) == len(table) - 1
    assert verdict(4, ok, f"{len(VECTORS)} rule vectors={vectors}, named examples={named}, "
                          f"case-insensitive={case}, onset-clip rule={onset_rule}")


# -- 5. many weak labels beat a small gold set --------------------------------

@pytest.mark.slow
def test_criterion_5_scaling(verdict):
    t0 = time.perf_counter()
    run = E.scaling()
    secs = time.perf_counter() - t0
    ok = run.auroc_gain >= 0.02 and run.n_weak >= 10 * run.n_gold and secs < 1800
    assert verdict(5, ok, f"weak {run.weak.auroc:.4f} on {run.n_weak} clips vs gold {run.gold.auroc:.4f} on "
                          f"{run.n_gold} clips, gain {100 * run.auroc_gain:+.2f} points, {secs / 60:.1f} min")


# -- 6. multilabel beats binary under confounded artifacts --------------------

@pytest.mark.slow
def test_criterion_6_class_specificity(verdict):
    t0 = time.perf_counter()
    runs = E.class_specificity()
    secs = time.perf_counter() - t0
    gain = float(np.median([r.auroc_gain for r in runs]))
    d_fpr = float(np.median([r.binary.movement_fpr - r.multilabel.movement_fpr for r in runs]))
    ratio = float(np.median([r.fps_ratio for r in runs]))
    ok = gain >= 0.02 and d_fpr > 0 and ratio >= 1.3 and secs < 3600
    per_seed = "; ".join(f"seed {r.seed}: {r.binary.auroc:.4f} -> {r.multilabel.auroc:.4f}" for r in runs)
    assert verdict(6, ok, f"median gain {100 * gain:+.2f} points, movement FPR drop {d_fpr:+.3f}, "
                          f"FPs/24h ratio {ratio:.2f}; {per_seed}; {secs / 60:.1f} min")


# -- 7. planted pediatric disadvantage shows in the subgroup report ------------

@pytest.mark.slow
def test_criterion_7_subgroups(verdict, tmp_path):
    run = E.subgroups()
    rows = {r.name: r for r in run.report}
    ped, adult = rows["Pediatrics"], rows["Adults"]
    separated = ped.auroc < adult.auroc and ped.upper < adult.lower
    report.write_csv(tmp_path / "subgroups.csv", report.SUBGROUP_HEADER, report.subgroup_table_rows(run.report))
    text = report.format_subgroup_table(run.report)
    t = run.table
    thr = class_balance_threshold(t.scores, t.gold)
    report.plot_fpr_bars(tmp_path / "fpr.svg", {"model": attribute_fpr(t.scores, t.gold, t.attributes,
                                                                        t.attribute_names, thr)})
    rendered = (tmp_path / "fpr.svg").stat().st_size > 0 and "Pediatrics" in text
    ok = separated and rendered
    assert verdict(7, ok, f"pediatric {ped.auroc:.4f} [{ped.lower:.4f}, {ped.upper:.4f}] vs adult "
                          f"{adult.auroc:.4f} [{adult.lower:.4f}, {adult.upper:.4f}], table and bars rendered={rendered}")


# -- 8. determinism and round trips -------------------------------------------

def _toy_data():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 0.3, size=(72, 64, 2))
    y = np.zeros((72, 2), dtype=np.uint8)
    y[::3, 0] = 1
    x[::3, 20:40, 0] += 1.5
    return TrainData(x[:48], y[:48], x[48:], y[48:, 0].astype(int), ["seizure", "movement artifact"])


def test_criterion_8_determinism(verdict, tmp_path):
    base = ModelConfig(n_layers=1, n_filters=4, state_dim=4, input_channels=2, clip_len=64)
    cfg = TrainConfig(lr0=0.01, pos_bias=2.0, epoch_cap=64, n_epochs=3, batch_size=16, seed=5)
    logs = []
    for k in range(2):
        res = train_from_scratch(base, _toy_data(), cfg)
        write_metric_log(tmp_path / f"log{k}.csv", res.log)
        logs.append((tmp_path / f"log{k}.csv").read_bytes())
    logs_equal = logs[0] == logs[1]

    # checkpoints hold 32-bit floats, the training precision
    x = np.random.default_rng(1).normal(size=(4, 64, 2)).astype(np.float32)
    with ad.precision(32):
        m = res.checkpoint.to_model()
        save_checkpoint(tmp_path / "m.ckpt", res.checkpoint)
        logits_equal = np.array_equal(m.forward(x).data, load_checkpoint(tmp_path / "m.ckpt").to_model().forward(x).data)

    sig = np.random.default_rng(2).normal(0, 40, size=(19, 2000))
    write_edf(tmp_path / "r.edf", sig, 200, list(STANDARD_CHANNELS), phys_range=(-300, 300))
    back = read_edf(tmp_path / "r.edf", target_rate=None)
    step = 600 / 65535
    edf_err = float(np.max(np.abs(back.samples - np.clip(sig, -300, 300))))
    edf_ok = edf_err <= step / 2 + 1e-9
    ok = logs_equal and logits_equal and edf_ok
    assert verdict(8, ok, f"metric logs bitwise={logs_equal}, checkpoint logits bitwise={logits_equal}, "
                          f"EDF max err {edf_err:.2e} <= step/2 {step / 2:.2e}")
