"""Class activation maps and channel-level attribution.

With a global-average-pool head and a bias-free dense classifier, the weighted
sum of last-conv feature maps is an exact spatial decomposition of each logit:
averaging a class's map over positions reproduces that class's logit.  Maps
are linearly upsampled to segment resolution, and samples above the map's
nearest-rank 80th percentile form the highlighted region.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import zoo
from .signal_io import CLASS_NAMES, N_CLASSES, Segment


class UnsupportedArchitectureError(ValueError):
    """The model does not end in GAP + bias-free dense, so maps are undefined."""


HIGHLIGHT_PERCENTILE = 80.0


@dataclass
class CamMap:
    """One class's activation map for one segment."""

    class_id: int
    values: np.ndarray  # [L_last] map at feature resolution
    upsampled: np.ndarray  # [segment samples] linear interpolation
    highlight: np.ndarray  # bool mask, strictly above the percentile threshold
    threshold: float
    logit: float
    prob: float


def _nearest_rank_threshold(values: np.ndarray, percentile: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    n = values.size
    rank = int(np.ceil(percentile / 100.0 * n))
    rank = min(max(rank, 1), n)
    return float(np.sort(values, kind="mergesort")[rank - 1])


def _upsample(values: np.ndarray, length: int) -> np.ndarray:
    """Linear interpolation placing map bins at their window centers."""
    src = values.size
    centers = (np.arange(src) + 0.5) * (length / src) - 0.5
    return np.interp(np.arange(length), centers, values)


def _check_model(model: zoo.Model) -> None:
    if not zoo.has_cam_head(model):
        raise UnsupportedArchitectureError(
            f"{model.spec.name} lacks a global-average-pool head with a "
            "bias-free classifier; activation maps are only exact there"
        )


def cam(model: zoo.Model, segment: Segment | np.ndarray, class_id: int) -> CamMap:
    """Activation map of `class_id` for one segment.

    Invariant: values.mean() equals the class logit (exactly in exact
    arithmetic; to float tolerance here).
    """
    _check_model(model)
    if not 0 <= class_id < N_CLASSES:
        raise ValueError(f"class_id must lie in [0, {N_CLASSES}), got {class_id}")
    values = segment.values if isinstance(segment, Segment) else np.asarray(segment)
    with ad.no_grad():
        logits, last = model.apply(values[None, :], training=False)
    probs = ad.softmax(logits.data)
    w = model.params["head.w"].data  # [C, K]
    feature_maps = last.data[0]  # [C, L_last]
    raw = np.tensordot(w[:, class_id], feature_maps, axes=([0], [0]))  # [L_last]
    upsampled = _upsample(raw, values.size)
    threshold = _nearest_rank_threshold(upsampled, HIGHLIGHT_PERCENTILE)
    return CamMap(
        class_id=class_id,
        values=raw,
        upsampled=upsampled,
        highlight=upsampled > threshold,
        threshold=threshold,
        logit=float(logits.data[0, class_id]),
        prob=float(probs[0, class_id]),
    )


def cam_under_assigned_label(model: zoo.Model, segment: Segment | np.ndarray) -> CamMap:
    """Map for the class the model itself assigns to the segment."""
    _check_model(model)
    values = segment.values if isinstance(segment, Segment) else np.asarray(segment)
    with ad.no_grad():
        logits, _ = model.apply(values[None, :], training=False)
    return cam(model, segment, int(np.argmax(logits.data[0])))


@dataclass
class ChannelActivationProfile:
    """Mean last-conv activation per channel, split by true class."""

    mean_activation: np.ndarray  # [n_classes, n_channels]
    n_segments: np.ndarray  # [n_classes]

    @property
    def normalized(self) -> np.ndarray:
        """Per-channel max-abs normalization; values land in [-1, 1]."""
        denom = np.abs(self.mean_activation).max(axis=0)
        return self.mean_activation / np.where(denom > 0, denom, 1.0)

    def selectivity(self, class_id: int) -> np.ndarray:
        """Ratio of a class's mean activation to the best other class."""
        own = self.mean_activation[class_id]
        others = np.delete(self.mean_activation, class_id, axis=0).max(axis=0)
        return own / np.where(others > 0, others, np.finfo(float).tiny)


def _batched_last_conv(
    model: zoo.Model, segments: list[Segment], batch_size: int = 256
) -> np.ndarray:
    """Mean-over-positions last-conv activation per segment: [n, C]."""
    out = []
    with ad.no_grad():
        for lo in range(0, len(segments), batch_size):
            x = np.stack([s.values for s in segments[lo : lo + batch_size]])
            _, last = model.apply(x, training=False)
            if last is None:
                raise UnsupportedArchitectureError(
                    f"{model.spec.name} exposes no conv feature maps"
                )
            out.append(last.data.mean(axis=2))
    return np.vstack(out)


def channel_profile(
    model: zoo.Model, segments: list[Segment], batch_size: int = 256
) -> ChannelActivationProfile:
    """Per-class channel activation means over a labeled segment corpus."""
    _check_model(model)
    if not segments:
        raise ValueError("channel_profile needs at least one segment")
    per_seg = _batched_last_conv(model, segments, batch_size)
    labels = np.array([int(s.label) for s in segments])
    means, counts = [], []
    for c in range(N_CLASSES):
        rows = per_seg[labels == c]
        if rows.size == 0:
            raise ValueError(
                f"class {CLASS_NAMES[c]} has no segments; profile undefined"
            )
        means.append(rows.mean(axis=0))
        counts.append(rows.shape[0])
    return ChannelActivationProfile(np.vstack(means), np.array(counts))


def max_activating_segments(
    model: zoo.Model,
    segments: list[Segment],
    channel: int,
    top_k: int = 10,
    batch_size: int = 256,
) -> list[tuple[int, float]]:
    """Indices of the segments with the highest mean activation of a channel."""
    _check_model(model)
    if not segments:
        raise ValueError("max_activating_segments needs at least one segment")
    per_seg = _batched_last_conv(model, segments, batch_size)
    if not 0 <= channel < per_seg.shape[1]:
        raise ValueError(
            f"channel {channel} out of range for {per_seg.shape[1]} channels"
        )
    scores = per_seg[:, channel]
    order = np.argsort(-scores, kind="mergesort")[:top_k]
    return [(int(i), float(scores[i])) for i in order]


# ---------------------------------------------------------------------------
# highlight geometry (ground-truth overlap checks)
# ---------------------------------------------------------------------------


def highlight_spans(mask: np.ndarray) -> list[tuple[int, int]]:
    """Contiguous True runs as half-open [start, stop) index pairs."""
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        return []
    diff = np.diff(mask.astype(np.int8))
    starts = np.flatnonzero(diff == 1) + 1
    stops = np.flatnonzero(diff == -1) + 1
    if mask[0]:
        starts = np.concatenate([[0], starts])
    if mask[-1]:
        stops = np.concatenate([stops, [mask.size]])
    return list(zip(starts.tolist(), stops.tolist()))


def interval_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Intersection over union of two half-open intervals."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def best_span_iou(mask: np.ndarray, interval: tuple[float, float]) -> float:
    """Best IoU between any contiguous highlighted span and an interval."""
    return max(
        (interval_iou((float(lo), float(hi)), interval) for lo, hi in highlight_spans(mask)),
        default=0.0,
    )
