"""Attention diagnostics: per-frame weights and percentile curves."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .evaluation import sample_frames
from .heads import MultiFrameHead
from .types import SequenceRecord, Tracklet


def attention_trace(tracklet: Tracklet, head: MultiFrameHead) -> list:
    """``[(frame_index, weight), ...]`` in tracklet order."""
    if len(tracklet) == 0:
        raise ValueError("empty tracklet")
    w = head.attend(head.embed(tracklet.features()))
    return [(d.frame_index, float(x)) for d, x in zip(tracklet.detections, w)]


def percentile_indices(n: int, n_samples: int = 21) -> list:
    """Equally spaced frame indices ``floor(p * (n - 1) / (n_samples - 1))``."""
    if n < 1 or n_samples < 2:
        raise ValueError("need n >= 1 and n_samples >= 2")
    return [(p * (n - 1)) // (n_samples - 1) for p in range(n_samples)]


@dataclass(frozen=True)
class CurvePoint:
    percentile: float
    mean: float
    std: float
    n: int


def record_weights(record: SequenceRecord, head: MultiFrameHead, n_samples: int = 21) -> np.ndarray:
    """Attention over the target's detections at ``n_samples`` equally spaced frames.

    Short records repeat frames. Positions where the target is not visible
    are NaN; the remaining weights sum to one.
    """
    if record.gt_tracklet is None:
        raise ValueError(f"record {record.sequence_id!r} has no ground-truth tracklet")
    idx = percentile_indices(record.n_frames, n_samples)
    by_frame = record.gt_tracklet.by_frame()
    rows = [p for p, i in enumerate(idx) if i in by_frame]
    out = np.full(n_samples, np.nan)
    if not rows:
        return out
    feats = np.stack([by_frame[idx[p]].conv_feature for p in rows])
    out[rows] = head.attend(head.embed(feats))
    return out


def percentile_curve(records: Sequence[SequenceRecord], head: MultiFrameHead, n_samples: int = 21) -> list:
    """Mean and std of the attention weight at each percentile position across records."""
    usable = [r for r in records if r.gt_tracklet is not None]
    if not usable:
        raise ValueError("no records with a ground-truth tracklet")
    table = np.stack([record_weights(r, head, n_samples) for r in usable])
    step = 100.0 / (n_samples - 1)
    points = []
    for p in range(n_samples):
        col = table[:, p]
        col = col[~np.isnan(col)]
        if col.size == 0:
            points.append(CurvePoint(p * step, float("nan"), float("nan"), 0))
        else:
            points.append(CurvePoint(p * step, float(col.mean()), float(col.std()), int(col.size)))
    return points


def curve_argmax(points: Sequence[CurvePoint]) -> int:
    means = np.array([p.mean for p in points])
    return int(np.nanargmax(means))
