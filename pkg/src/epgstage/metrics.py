"""Threshold metrics, one-vs-all ROC analysis and prediction aggregation.

Per-segment softmax traces are the common currency: evaluation either scores
them directly or first averages them over non-overlapping time blocks (never
across a label change), which is how longer observation windows are modeled.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .signal_io import CLASS_NAMES, N_CLASSES, SEGMENT_SECONDS


class UndefinedAucError(ValueError):
    """AUC is undefined because one of the two groups is empty."""


@dataclass
class PredictionTrace:
    """Chronological per-window class scores for one subject.

    `times_s` are window start times (strictly increasing), `probs` rows are
    softmax vectors, `labels` the true class indices.
    """

    times_s: np.ndarray
    probs: np.ndarray
    labels: np.ndarray
    subject_id: str = ""

    def __post_init__(self) -> None:
        self.times_s = np.asarray(self.times_s, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.times_s.size
        if self.probs.shape != (n, N_CLASSES) or self.labels.shape != (n,):
            raise ValueError(
                f"inconsistent trace shapes: times {self.times_s.shape}, "
                f"probs {self.probs.shape}, labels {self.labels.shape}"
            )
        if n and np.any(np.diff(self.times_s) <= 0):
            raise ValueError("trace times must strictly increase")
        if n:
            if self.probs.min() < -1e-9 or self.probs.max() > 1 + 1e-9:
                raise ValueError("trace probabilities must lie in [0, 1]")
            sums = self.probs.sum(axis=1)
            if np.abs(sums - 1.0).max() > 1e-6:
                raise ValueError("trace probability rows must sum to 1 within 1e-6")

    def __len__(self) -> int:
        return self.times_s.size


def concat_traces(traces: list[PredictionTrace]) -> tuple[np.ndarray, np.ndarray]:
    """Pool scores and labels from several traces (for cross-subject AUC)."""
    probs = np.concatenate([t.probs for t in traces]) if traces else np.empty((0, 3))
    labels = np.concatenate([t.labels for t in traces]) if traces else np.empty(0, int)
    return probs, labels


def write_trace_csv(path: str | Path, trace: PredictionTrace) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s"] + [f"p_{n}" for n in CLASS_NAMES] + ["label"])
        for i in range(len(trace)):
            writer.writerow(
                [f"{trace.times_s[i]:.3f}"]
                + [f"{p:.9f}" for p in trace.probs[i]]
                + [int(trace.labels[i])]
            )


def read_trace_csv(path: str | Path, subject_id: str = "") -> PredictionTrace:
    times, probs, labels = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            times.append(float(row["time_s"]))
            probs.append([float(row[f"p_{n}"]) for n in CLASS_NAMES])
            labels.append(int(row["label"]))
    return PredictionTrace(
        np.array(times), np.array(probs), np.array(labels), subject_id
    )


# ---------------------------------------------------------------------------
# threshold metrics
# ---------------------------------------------------------------------------


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    precision_defined: bool = True
    recall_defined: bool = True
    f1_defined: bool = True


@dataclass
class MetricsReport:
    per_class: list[ClassMetrics]
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float


def confusion_counts(
    y_true: np.ndarray, y_pred: np.ndarray, n_classes: int = N_CLASSES
) -> np.ndarray:
    """Counts[i, j] = windows of true class i predicted as class j."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch: {y_true.shape} vs {y_pred.shape}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return counts


def prf1_accuracy(counts: np.ndarray) -> MetricsReport:
    """Precision/recall/F1 per class plus accuracy and unweighted macros.

    A zero denominator yields the value 0.0 with the matching `*_defined`
    flag cleared, so empty classes cannot silently inflate macro averages.
    """
    counts = np.asarray(counts)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
        raise ValueError(f"confusion table must be square, got {counts.shape}")
    if counts.min() < 0:
        raise ValueError("confusion counts must be non-negative")
    k = counts.shape[0]
    total = counts.sum()
    per_class: list[ClassMetrics] = []
    for c in range(k):
        tp = int(counts[c, c])
        fp = int(counts[:, c].sum() - tp)
        fn = int(counts[c, :].sum() - tp)
        p_def = (tp + fp) > 0
        r_def = (tp + fn) > 0
        precision = tp / (tp + fp) if p_def else 0.0
        recall = tp / (tp + fn) if r_def else 0.0
        f_def = (precision + recall) > 0
        f1 = 2 * precision * recall / (precision + recall) if f_def else 0.0
        per_class.append(
            ClassMetrics(precision, recall, f1, tp + fn, p_def, r_def, f_def)
        )
    accuracy = float(np.trace(counts) / total) if total else 0.0
    return MetricsReport(
        per_class=per_class,
        accuracy=accuracy,
        macro_precision=float(np.mean([m.precision for m in per_class])),
        macro_recall=float(np.mean([m.recall for m in per_class])),
        macro_f1=float(np.mean([m.f1 for m in per_class])),
    )


# ---------------------------------------------------------------------------
# ROC / AUC
# ---------------------------------------------------------------------------


def _midrank(x: np.ndarray) -> np.ndarray:
    """Ranks starting at 1; tied values receive the midpoint of their span."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size, dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc_ova(
    scores: np.ndarray, labels: np.ndarray, class_id: int
) -> tuple[float, np.ndarray]:
    """One-vs-all AUC for one class plus its ROC polyline.

    The AUC is the tie-aware rank statistic (probability that a random
    positive outranks a random negative, ties counting half), identical to the
    area under the ROC curve returned alongside it.  Raises UndefinedAucError
    when either group is empty.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim == 2:
        score = scores[:, class_id]
    else:
        score = scores
    pos = labels == class_id
    n_pos = int(pos.sum())
    n_neg = int(pos.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError(
            f"class {class_id} ({CLASS_NAMES[class_id] if class_id < len(CLASS_NAMES) else '?'}): "
            f"{n_pos} positives vs {n_neg} negatives; AUC needs both"
        )
    ranks = _midrank(score)
    auc = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    # ROC polyline, one vertex per distinct threshold, from (0,0) to (1,1)
    order = np.argsort(-score, kind="mergesort")
    sorted_pos = pos[order].astype(np.float64)
    tp = np.cumsum(sorted_pos)
    fp = np.cumsum(1.0 - sorted_pos)
    distinct = np.flatnonzero(np.diff(score[order])) if score.size > 1 else np.empty(0, int)
    keep = np.concatenate([distinct, [score.size - 1]]).astype(int)
    points = np.column_stack(
        [
            np.concatenate([[0.0], fp[keep] / n_neg]),
            np.concatenate([[0.0], tp[keep] / n_pos]),
        ]
    )
    return float(auc), points


def macro_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Unweighted mean of the three one-vs-all AUCs."""
    return float(
        np.mean([roc_auc_ova(scores, labels, c)[0] for c in range(N_CLASSES)])
    )


def per_class_auc(scores: np.ndarray, labels: np.ndarray) -> list[float]:
    return [roc_auc_ova(scores, labels, c)[0] for c in range(N_CLASSES)]


# ---------------------------------------------------------------------------
# aggregation over longer observation windows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AggregationConfig:
    pool_lengths_s: tuple[int, ...] = (5, 30, 60, 120, 300, 600, 1200, 1800, 3600)


def aggregate(trace: PredictionTrace, pool_length_s: float) -> PredictionTrace:
    """Average softmax rows over non-overlapping blocks of `pool_length_s`.

    Blocks are laid out within each run of constant label, anchored at the
    run's first row, so no block ever spans a label change; a trailing
    partial block averages whatever rows it holds.  Each output row keeps the
    time of its block's first row.  Pooling at the native window length is the
    identity, and pooling twice at one length equals pooling once.
    """
    if pool_length_s <= 0:
        raise ValueError(f"pool_length_s must be positive, got {pool_length_s}")
    n = len(trace)
    if n == 0:
        return trace
    run_starts = np.flatnonzero(np.diff(trace.labels) != 0) + 1
    run_bounds = np.concatenate([[0], run_starts, [n]])
    out_t, out_p, out_y = [], [], []
    for lo, hi in zip(run_bounds[:-1], run_bounds[1:]):
        t = trace.times_s[lo:hi]
        bucket = np.floor((t - t[0]) / pool_length_s).astype(np.int64)
        for b in np.unique(bucket):
            rows = np.flatnonzero(bucket == b)
            out_t.append(t[rows[0]])
            out_p.append(trace.probs[lo:hi][rows].mean(axis=0))
            out_y.append(trace.labels[lo])
    return PredictionTrace(
        np.array(out_t), np.vstack(out_p), np.array(out_y), trace.subject_id
    )


def auc_vs_pool_curve(
    fold_traces: list[list[PredictionTrace]],
    pool_lengths_s: tuple[int, ...] = AggregationConfig().pool_lengths_s,
) -> dict[int, dict[str, float]]:
    """Fold-mean macro and per-class AUC at each pool length.

    `fold_traces[f]` holds the held-out traces of fold f; scores are pooled
    across a fold's traces before the AUC, then averaged across folds.
    """
    curve: dict[int, dict[str, float]] = {}
    for pool in pool_lengths_s:
        macros, per_class = [], []
        for traces in fold_traces:
            agg = [aggregate(t, pool) for t in traces]
            probs, labels = concat_traces(agg)
            macros.append(macro_auc(probs, labels))
            per_class.append(per_class_auc(probs, labels))
        entry = {"macro": float(np.mean(macros))}
        means = np.mean(per_class, axis=0)
        for c, name in enumerate(CLASS_NAMES):
            entry[name] = float(means[c])
        curve[int(pool)] = entry
    return curve


def class_score_timeline(
    trace: PredictionTrace, smooth_s: float = 60.0
) -> tuple[np.ndarray, np.ndarray]:
    """Centered moving average of each class score over a time window.

    Returns (times, smoothed [n, 3]); rows within smooth_s/2 of row i
    contribute to its average, so gaps in the trace shrink the window.
    """
    if smooth_s < 0:
        raise ValueError("smooth_s must be non-negative")
    t = trace.times_s
    n = t.size
    if n == 0 or smooth_s == 0:
        return t.copy(), trace.probs.copy()
    lo = np.searchsorted(t, t - smooth_s / 2, side="left")
    hi = np.searchsorted(t, t + smooth_s / 2, side="right")
    csum = np.vstack([np.zeros(N_CLASSES), np.cumsum(trace.probs, axis=0)])
    smoothed = (csum[hi] - csum[lo]) / (hi - lo)[:, None]
    return t.copy(), smoothed


# ---------------------------------------------------------------------------
# fold summaries
# ---------------------------------------------------------------------------


@dataclass
class FoldScores:
    """Per-fold evaluation numbers used by the summary table."""

    fold: str
    per_class_auc: list[float]
    report: MetricsReport

    @property
    def macro_auc(self) -> float:
        return float(np.mean(self.per_class_auc))


def score_fold(
    traces: list[PredictionTrace], fold: str, pool_length_s: float = SEGMENT_SECONDS
) -> FoldScores:
    agg = [aggregate(t, pool_length_s) for t in traces]
    probs, labels = concat_traces(agg)
    preds = probs.argmax(axis=1)
    return FoldScores(
        fold=fold,
        per_class_auc=per_class_auc(probs, labels),
        report=prf1_accuracy(confusion_counts(labels, preds)),
    )


def summary_rows(folds: list[FoldScores]) -> list[dict]:
    """Mean +/- sd across folds, one row per class plus a macro row."""
    rows = []
    for c, name in enumerate(CLASS_NAMES):
        vals = {
            "precision": [f.report.per_class[c].precision for f in folds],
            "recall": [f.report.per_class[c].recall for f in folds],
            "f1": [f.report.per_class[c].f1 for f in folds],
            "auc": [f.per_class_auc[c] for f in folds],
        }
        row = {"class": name}
        for key, v in vals.items():
            row[f"{key}_mean"] = float(np.mean(v))
            row[f"{key}_sd"] = float(np.std(v))
        rows.append(row)
    macro = {"class": "macro"}
    for key, getter in (
        ("precision", lambda f: f.report.macro_precision),
        ("recall", lambda f: f.report.macro_recall),
        ("f1", lambda f: f.report.macro_f1),
        ("auc", lambda f: f.macro_auc),
    ):
        v = [getter(f) for f in folds]
        macro[f"{key}_mean"] = float(np.mean(v))
        macro[f"{key}_sd"] = float(np.std(v))
    rows.append(macro)
    acc = [f.report.accuracy for f in folds]
    rows.append(
        {
            "class": "accuracy",
            "precision_mean": "",
            "precision_sd": "",
            "recall_mean": "",
            "recall_sd": "",
            "f1_mean": "",
            "f1_sd": "",
            "auc_mean": float(np.mean(acc)),
            "auc_sd": float(np.std(acc)),
        }
    )
    return rows
