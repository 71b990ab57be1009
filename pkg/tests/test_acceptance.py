"""Acceptance checks: one test per headline requirement.

Each test asserts the stated tolerance and finishes with a single PASS line
carrying the measured numbers (visible under `pytest -s` or `-rA`).  The
first six run on their own small inputs; the rest share the session-scoped
desk run from conftest, and the final one retrains a fold from scratch to
prove bitwise reproducibility.
"""

import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

import test_metrics
from conftest import stage_elapsed
from gradcheck import TOLERANCE, run_suite

from epgstage import cli, explain, signal_io, synthgen, zoo
from epgstage.config import load_config
from epgstage.metrics import prf1_accuracy, roc_auc_ova
from epgstage.preprocess import pchip_fill, preprocess_recording
from epgstage.signal_io import Phase, PhaseMark, Recording, SEGMENT_SAMPLES
from epgstage.trainer import make_folds, train_fold


def _read_rows(path: Path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# numerics
# ---------------------------------------------------------------------------


def test_gradients_match_finite_differences():
    t0 = time.perf_counter()
    results = run_suite()
    elapsed = time.perf_counter() - t0
    worst = max(r.rel_err for r in results)
    assert len(results) >= 100
    assert worst < TOLERANCE
    assert elapsed < 300.0
    print(
        f"PASS gradients: {len(results)} configs, "
        f"max rel err {worst:.2e} < {TOLERANCE:g}, {elapsed:.1f}s"
    )


def test_model_sizes_match_layer_arithmetic(tmp_path):
    counts = {name: zoo.count_trainables(zoo.build(name)) for name in zoo.MODEL_NAMES}
    assert counts["FNN"] == 2_920_963
    published = {"DCNN": (1_607_187, 0.005), "Proposed16": (4_200_048, 0.02),
                 "EEGNet2": (4_195_107, 0.02)}
    gaps = {}
    for name, (target, band) in published.items():
        gaps[name] = counts[name] / target - 1.0
        assert abs(gaps[name]) <= band, f"{name}: {counts[name]} vs {target}"
    report = tmp_path / "counts.csv"
    zoo.write_count_report(report)
    rows = _read_rows(report)
    for name in zoo.MODEL_NAMES:
        mine = [r for r in rows if r["model"] == name]
        assert mine, f"no layer rows for {name}"
        assert sum(int(r["trainables"]) for r in mine) == counts[name]
        assert all(int(r["total"]) == counts[name] for r in mine)
    print(
        "PASS model sizes: FNN exact 2,920,963; "
        + "; ".join(f"{n} {counts[n]:,} ({gaps[n]:+.3%})" for n in published)
        + f"; per-layer report rows {len(rows)}"
    )


# ---------------------------------------------------------------------------
# metrics and preprocessing oracles
# ---------------------------------------------------------------------------


def test_auc_equals_pairwise_oracle():
    rng = np.random.default_rng(7)
    checked, worst = 0, 0.0
    while checked < 50:
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 3, size=n)
        if rng.random() < 0.5:
            score = rng.integers(0, 5, size=n) / 4.0  # heavy exact ties
        else:
            score = rng.random(n)
        class_id = int(rng.integers(0, 3))
        n_pos = int((labels == class_id).sum())
        if n_pos == 0 or n_pos == n:
            continue
        auc, _ = roc_auc_ova(score, labels, class_id)
        diff = abs(auc - test_metrics._pairwise_auc(score, labels, class_id))
        worst = max(worst, diff)
        assert diff <= 1e-12
        checked += 1
    print(f"PASS auc oracle: 50 traces, max |diff| {worst:.1e} <= 1e-12")


def test_prf1_tables_exact():
    tables = test_metrics.PRF1_TABLES
    assert len(tables) == 10
    for counts, expected, accuracy in tables:
        rep = prf1_accuracy(np.array(counts))
        for got, (p, r, f1, p_def, r_def, f_def) in zip(rep.per_class, expected):
            assert (got.precision, got.recall, got.f1) == (p, r, f1)
            assert (got.precision_defined, got.recall_defined, got.f1_defined) == (
                p_def, r_def, f_def,
            )
        assert rep.accuracy == accuracy
        assert rep.macro_f1 == np.mean([e[2] for e in expected])
    print("PASS prf1: 10 fixed confusion tables, exact equality")


def test_missing_sample_boundary_and_fill():
    fs = 512
    n = 4 * SEGMENT_SAMPLES + 700  # four windows plus a remainder
    t = np.arange(n) / fs
    samples = np.sin(2 * np.pi * 6.0 * t).astype(np.float32) * 40.0
    rng = np.random.default_rng(0)
    # window 0: exactly 512 lost samples (20%), kept; window 1: 513, dropped
    w0 = rng.choice(SEGMENT_SAMPLES, size=512, replace=False)
    w1 = rng.choice(SEGMENT_SAMPLES, size=513, replace=False) + SEGMENT_SAMPLES
    samples[w0] = np.nan
    samples[w1] = np.nan
    rec = Recording(
        subject_id="edge", group="PPS", sample_rate_hz=fs, samples=samples,
        phase_marks=[PhaseMark(0.0, Phase.BASELINE)],
    )
    segments, summary = preprocess_recording(rec)
    starts = [s.start_time_s for s in segments]
    assert summary.n_kept == 3 and summary.n_discarded_missing == 1
    assert SEGMENT_SAMPLES / fs not in starts  # the 513-NaN window is gone
    assert 0.0 in starts  # the 512-NaN window survived
    assert summary.n_tail_samples == 700  # trailing remainder dropped

    # shape-preserving fill: anchors exact, no overshoot on monotone spans
    x = np.linspace(0.0, 30.0, 400) ** 1.5
    holes = np.zeros(400, dtype=bool)
    holes[37:44] = holes[120:126] = holes[300:330] = True
    y = x.copy()
    y[holes] = np.nan
    filled = pchip_fill(y)
    assert np.array_equal(filled[~holes], x[~holes])
    assert np.all(np.diff(filled) >= 0)  # monotone data stays monotone
    for lo, hi in ((37, 44), (120, 126), (300, 330)):
        assert filled[lo:hi].min() >= filled[lo - 1]
        assert filled[lo:hi].max() <= filled[hi]
    print(
        "PASS missing-sample boundary: 512-NaN window kept, 513 dropped, "
        "tail remainder counted; pchip anchors exact, monotone fill bounded"
    )


# ---------------------------------------------------------------------------
# desk-scale end-to-end run
# ---------------------------------------------------------------------------


def test_staging_auc_on_held_out_subjects(desk_run):
    rows = {r["class"]: r for r in _read_rows(desk_run / "eval" / "metrics_summary.csv")}
    macro = float(rows["macro"]["auc_mean"])
    per_class = {c: float(rows[c]["auc_mean"]) for c in ("Baseline", "EarlyEPG", "LateEPG")}
    assert macro >= 0.85
    assert per_class["Baseline"] >= per_class["EarlyEPG"]
    assert per_class["Baseline"] >= per_class["LateEPG"]
    total = sum(stage_elapsed(desk_run).values())
    assert total < 1800.0
    print(
        f"PASS staging: macro AUC {macro:.4f} >= 0.85; Baseline {per_class['Baseline']:.4f}"
        f" >= Early {per_class['EarlyEPG']:.4f}, Late {per_class['LateEPG']:.4f};"
        f" pipeline {total:.0f}s < 1800s"
    )


def test_pooled_scores_never_degrade(desk_run):
    rows = {int(r["pool_s"]): float(r["macro_auc"])
            for r in _read_rows(desk_run / "eval" / "auc_vs_pool.csv")}
    pools = (5, 30, 60, 300)
    values = [rows[p] for p in pools]
    assert all(b >= a for a, b in zip(values, values[1:]))
    gain = values[-1] - values[0]
    if values[0] < 0.95:
        assert gain >= 0.02
    print(
        "PASS aggregation: macro AUC "
        + " -> ".join(f"{v:.4f}" for v in values)
        + f" over {pools}s pools (gain {gain:+.4f})"
    )


def test_control_subjects_score_near_chance(desk_run):
    rows = {r["class"]: float(r["auc"])
            for r in _read_rows(desk_run / "eval" / "control_auc.csv")}
    for name in ("Baseline", "EarlyEPG", "LateEPG"):
        assert 0.40 <= rows[name] <= 0.60, f"{name}: {rows[name]}"
    print(
        "PASS control chance-level: per-class AUC "
        + ", ".join(f"{n} {rows[n]:.3f}" for n in ("Baseline", "EarlyEPG", "LateEPG"))
        + " all in [0.40, 0.60]"
    )


def _timeline(path: Path):
    rows = _read_rows(path)
    t = np.array([float(r["time_s"]) for r in rows])
    probs = {k[2:]: np.array([float(r[k]) for r in rows])
             for k in rows[0] if k.startswith("p_")}
    return t, probs


def test_stage_score_timelines(desk_run):
    rec = signal_io.load_recording(desk_run / "recordings", "pps01")
    spans = {m.phase: m.timestamp_s for m in rec.phase_marks}
    t, probs = _timeline(desk_run / "eval" / "timeline_pps_pps01.csv")
    baseline = t < spans[Phase.EARLY_EPG]
    final = t >= spans[Phase.LATE_EPG]
    bl_mean = probs["Baseline"][baseline].mean()
    late_final = probs["LateEPG"][final].mean()
    late_baseline = probs["LateEPG"][baseline].mean()
    assert bl_mean > 0.6
    assert late_final > 0.5
    assert late_baseline < 0.3
    _, ctl = _timeline(desk_run / "eval" / "timeline_control_ctl01.csv")
    ctl_late_max = ctl["LateEPG"].max()
    assert ctl_late_max < 0.4
    print(
        f"PASS timelines: baseline-span Baseline mean {bl_mean:.3f} > 0.6; "
        f"final-span LateEPG mean {late_final:.3f} > 0.5; baseline-span LateEPG "
        f"{late_baseline:.3f} < 0.3; control LateEPG max {ctl_late_max:.3f} < 0.4"
    )


def test_activation_map_identity(desk_run):
    stores = cli._load_stores(desk_run)
    held_out = sorted(stores["PPS"])[0]
    model, _ = zoo.load_model(
        desk_run / "train" / f"fold_{held_out}" / "checkpoint.epgw"
    )
    model64 = model.astype(np.float64)
    segments = stores["PPS"][held_out][:34]  # 34 segments x 3 classes = 102 pairs

    pairs, worst_logit, worst_prob = 0, 0.0, 0.0
    for seg in segments:
        logits, _ = model64.apply(seg.values[None, :], training=False)
        ref_probs = np.exp(logits.data[0] - logits.data[0].max())
        ref_probs /= ref_probs.sum()
        pooled = np.empty(3)
        for class_id in range(3):
            m = explain.cam(model64, seg, class_id)
            worst_logit = max(worst_logit, abs(m.values.mean() - m.logit))
            assert abs(m.values.mean() - m.logit) < 1e-5
            pooled[class_id] = m.values.mean()
            pairs += 1
        soft = np.exp(pooled - pooled.max())
        soft /= soft.sum()
        worst_prob = max(worst_prob, np.abs(soft - ref_probs).max())
        assert np.abs(soft - ref_probs).max() < 1e-5
    assert pairs >= 100
    print(
        f"PASS activation maps: {pairs} (segment, class) pairs, "
        f"|mean(map) - logit| <= {worst_logit:.1e} < 1e-5, "
        f"softmax(pooled maps) vs probabilities <= {worst_prob:.1e} < 1e-5"
    )


def test_selective_channels_and_event_overlap(desk_run):
    stores = cli._load_stores(desk_run)
    held_out = sorted(stores["PPS"])[0]
    model, _ = zoo.load_model(
        desk_run / "train" / f"fold_{held_out}" / "checkpoint.epgw"
    )
    model64 = model.astype(np.float64)
    segments = stores["PPS"][held_out]

    profile = explain.channel_profile(model64, segments)
    best = max(
        float(profile.selectivity(c).max()) for c in range(profile.mean_activation.shape[0])
    )
    assert best >= 2.0

    events = [
        e for e in synthgen.read_event_log(desk_run / "recordings" / f"{held_out}.events.csv")
        if e.motif == "sharp_wave"
    ]
    fs = signal_io.SAMPLE_RATE_HZ
    containing, hits = 0, 0
    for seg in segments:
        if seg.label != Phase.LATE_EPG:
            continue
        t0 = seg.start_time_s
        inside = [e for e in events if t0 <= e.time_s < t0 + SEGMENT_SAMPLES / fs]
        if not inside:
            continue
        containing += 1
        cam_map = explain.cam(model64, seg, int(Phase.LATE_EPG))
        best_iou = 0.0
        for e in inside:
            center = (e.time_s - t0) * fs
            half = e.width_ms * fs / 1000.0 / 2.0
            best_iou = max(
                best_iou,
                explain.best_span_iou(cam_map.highlight, (center - half, center + half)),
            )
        if best_iou > 0.3:
            hits += 1
    assert containing >= 10
    frac = hits / containing
    assert frac >= 0.5
    print(
        f"PASS explanations: peak channel selectivity {best:.2f}x >= 2x; "
        f"sharp-wave overlap IoU > 0.3 on {hits}/{containing} "
        f"({frac:.0%}) late-stage segments"
    )


def test_fold_training_reproduces_bitwise(desk_run, monkeypatch):
    monkeypatch.setenv("EPG_THREADS", "1")
    cfg = load_config(desk_run / "config.json")
    pps = cli._load_stores(desk_run)["PPS"]
    held_out = sorted(pps)[0]
    fold = next(f for f in make_folds(sorted(pps)) if f.held_out == held_out)
    result = train_fold(pps, fold, cfg.model, cfg.model_overrides or None, cfg.train)

    fold_dir = desk_run / "train" / f"fold_{held_out}"
    recorded = (fold_dir / "curve.csv").read_text().strip().splitlines()[1:]
    repeated = [
        f"{r.epoch},{r.train_loss:.6f},{r.val_loss:.6f},{r.val_accuracy:.4f}"
        for r in result.curve
    ]
    assert repeated == recorded

    saved, _ = zoo.load_model(fold_dir / "checkpoint.epgw")
    for name, p in result.model.params.items():
        assert p.data.tobytes() == saved.params[name].data.tobytes(), name
    for name, st in result.model.bn.items():
        assert st.running_mean.tobytes() == saved.bn[name].running_mean.tobytes()
        assert st.running_var.tobytes() == saved.bn[name].running_var.tobytes()
    assert (result.model.input_mean, result.model.input_std) == (
        saved.input_mean, saved.input_std,
    )
    print(
        f"PASS determinism: fold {held_out} retrained, {len(repeated)} curve rows, "
        f"{len(result.model.params)} parameter tensors and batch-norm state bitwise equal"
    )
