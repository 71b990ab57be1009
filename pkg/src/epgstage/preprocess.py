"""Cleaning and segmentation of raw recordings.

The cleaning chain mirrors the usual MATLAB recipe for chronic EEG: extreme
samples are flagged against a centered moving median (window 50) with a
threshold of three scaled median absolute deviations, flagged samples become
missing, and all missing samples are rebuilt with a shape-preserving piecewise
cubic (PCHIP).  The cleaned trace is then cut into non-overlapping five-second
windows; a window whose *raw* data loss exceeds 20% is discarded outright.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

from .signal_io import SEGMENT_SAMPLES, Phase, Recording, Segment

#: MAD of a normal sample underestimates sigma by this factor.
MAD_TO_SIGMA = 1.4826


@dataclass(frozen=True)
class OutlierConfig:
    """Moving-median outlier rule: |x - med| > mad_scale * scaled MAD."""

    window: int = 50
    mad_scale: float = 3.0

    def __post_init__(self) -> None:
        if self.window < 2:
            raise ValueError("outlier window must span at least 2 samples")
        if self.mad_scale <= 0:
            raise ValueError("mad_scale must be positive")


@dataclass(frozen=True)
class DiscardPolicy:
    """Windows with more than `max_missing_fraction` raw loss are dropped."""

    max_missing_fraction: float = 0.20

    @property
    def max_missing_samples(self) -> int:
        # strictly-greater rule: a window at exactly the floor is kept
        return int(np.floor(self.max_missing_fraction * SEGMENT_SAMPLES))


@dataclass
class SegmentationSummary:
    n_kept: int = 0
    n_discarded_missing: int = 0
    n_unlabeled: int = 0
    n_tail_samples: int = 0
    n_outlier_samples: int = 0
    n_missing_samples: int = 0
    per_phase: dict[str, int] = field(default_factory=dict)

    @property
    def discard_fraction(self) -> float:
        total = self.n_kept + self.n_discarded_missing + self.n_unlabeled
        return self.n_discarded_missing / total if total else 0.0


def _window_bounds(i: int, window: int, n: int) -> tuple[int, int]:
    """Centered window bounds, MATLAB style, shrunk at the edges.

    For even window lengths the extra slot sits before the center element:
    a window of 50 covers [i-25, i+24].
    """
    before = window // 2
    after = window - before - 1
    return max(0, i - before), min(n, i + after + 1)


def detect_outliers(x: np.ndarray, cfg: OutlierConfig = OutlierConfig()) -> np.ndarray:
    """Boolean mask of extreme samples; NaNs are never flagged.

    Medians are taken over the centered moving window with NaNs omitted;
    windows shrink at the trace edges instead of padding.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    mask = np.zeros(n, dtype=bool)
    if n == 0:
        return mask

    before = cfg.window // 2
    after = cfg.window - before - 1
    xp = np.pad(x, (before, after), constant_values=np.nan)

    # chunked so the window view never materializes more than ~100 MB
    chunk = max(1, (1 << 23) // cfg.window)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)  # all-NaN windows
        for start in range(0, n, chunk):
            stop = min(n, start + chunk)
            wins = np.lib.stride_tricks.sliding_window_view(
                xp[start : stop + cfg.window - 1], cfg.window
            )
            med = np.nanmedian(wins, axis=1)
            mad = np.nanmedian(np.abs(wins - med[:, None]), axis=1)
            limit = cfg.mad_scale * MAD_TO_SIGMA * mad
            dev = np.abs(x[start:stop] - med)
            valid = ~np.isnan(x[start:stop]) & ~np.isnan(med)
            mask[start:stop] = valid & (dev > limit)
    return mask


def pchip_fill(x: np.ndarray, missing: np.ndarray | None = None) -> np.ndarray:
    """Rebuild missing samples with a shape-preserving piecewise cubic.

    `missing` defaults to the NaN positions of `x`.  Anchors are every sample
    not marked missing; gaps at either end are filled by polynomial
    extrapolation of the boundary cubic, matching the usual MATLAB behaviour.
    """
    x = np.asarray(x, dtype=np.float64)
    if missing is None:
        missing = np.isnan(x)
    else:
        missing = np.asarray(missing, dtype=bool) | np.isnan(x)
    if not missing.any():
        return x.copy()
    anchors = np.flatnonzero(~missing)
    if anchors.size < 2:
        raise ValueError(
            f"insufficient anchors for interpolation: {anchors.size} finite "
            f"samples of {x.size}"
        )
    interp = PchipInterpolator(anchors, x[anchors], extrapolate=True)
    out = x.copy()
    holes = np.flatnonzero(missing)
    out[holes] = interp(holes)
    return out


def segment_recording(
    rec: Recording,
    cleaned: np.ndarray,
    raw_missing: np.ndarray,
    policy: DiscardPolicy = DiscardPolicy(),
) -> tuple[list[Segment], SegmentationSummary]:
    """Cut a cleaned trace into labeled, non-overlapping windows.

    Labels follow the phase in effect at each window's start time.  A window
    is discarded when its raw data loss exceeds the policy threshold; windows
    starting in unlabeled time are counted but not emitted.  The trailing
    remainder shorter than one window is dropped.
    """
    n_windows = cleaned.size // SEGMENT_SAMPLES
    summary = SegmentationSummary(
        n_tail_samples=int(cleaned.size - n_windows * SEGMENT_SAMPLES),
        n_missing_samples=int(raw_missing.sum()),
    )
    segments: list[Segment] = []
    max_missing = policy.max_missing_samples
    for w in range(n_windows):
        lo = w * SEGMENT_SAMPLES
        hi = lo + SEGMENT_SAMPLES
        n_missing = int(raw_missing[lo:hi].sum())
        if n_missing > max_missing:
            summary.n_discarded_missing += 1
            continue
        start_s = lo / rec.sample_rate_hz
        label = rec.phase_at(start_s)
        if label == Phase.UNLABELED:
            summary.n_unlabeled += 1
            continue
        segments.append(
            Segment(
                subject_id=rec.subject_id,
                start_time_s=start_s,
                label=label,
                values=cleaned[lo:hi].astype(np.float32),
            )
        )
        summary.n_kept += 1
        name = label.short_name
        summary.per_phase[name] = summary.per_phase.get(name, 0) + 1
    return segments, summary


def preprocess_recording(
    rec: Recording,
    outlier_cfg: OutlierConfig = OutlierConfig(),
    policy: DiscardPolicy = DiscardPolicy(),
) -> tuple[list[Segment], SegmentationSummary]:
    """Full cleaning chain for one recording.

    Outliers are detected on the raw trace, turned into missing samples and
    rebuilt together with the telemetry gaps; only the *raw* gaps count toward
    the discard rule, since artifact samples are repaired rather than lost.
    """
    raw = rec.samples.astype(np.float64)
    raw_missing = np.isnan(raw)
    outliers = detect_outliers(raw, outlier_cfg)
    cleaned = pchip_fill(raw, missing=raw_missing | outliers)
    segments, summary = segment_recording(rec, cleaned, raw_missing, policy)
    summary.n_outlier_samples = int(outliers.sum())
    return segments, summary
