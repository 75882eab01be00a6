"""Tracklet construction by pivot selection and propagation.

Inference: the most confident unassigned detection becomes the pivot; in
every other frame the unassigned detection that best matches the pivot joins,
provided its single-frame score clears ``propagation_threshold``. Assigned
detections are removed and the loop repeats.

Training: the pivot is instead the detection that best matches the paired
shop item, accepted only above ``pivot_match_threshold``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .heads import SingleFrameHead
from .types import Detection, Tracklet, iou


@dataclass(frozen=True)
class TrackingConfig:
    propagation_threshold: float = 0.5
    pivot_match_threshold: float = 0.7
    max_tracklets: int = 8

    def __post_init__(self):
        for name in ("propagation_threshold", "pivot_match_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.max_tracklets < 1:
            raise ValueError("max_tracklets must be positive")


def _flatten(frames: Sequence[Sequence[Detection]]) -> list:
    return [d for frame in frames for d in frame]


def _propagate(
    pivot: int,
    dets: list,
    descs: np.ndarray,
    alive: np.ndarray,
    by_frame: dict,
    head: SingleFrameHead,
    threshold: float,
    track_id: int,
) -> Tracklet:
    """Grow a tracklet around ``dets[pivot]`` and mark its members as used."""
    pivot_frame = dets[pivot].frame_index
    pivot_desc = descs[pivot]
    members = []
    for frame in sorted(by_frame):
        if frame == pivot_frame:
            members.append(pivot)
            continue
        best, best_score = -1, -1.0
        for i in by_frame[frame]:
            if not alive[i]:
                continue
            score = head.match_pair(pivot_desc, descs[i])
            if score > best_score:
                best, best_score = i, score
        if best >= 0 and best_score >= threshold:
            members.append(best)
    alive[members] = False
    return Tracklet(track_id, tuple(dets[i] for i in members), members.index(pivot))


def _index(frames):
    dets = _flatten(frames)
    by_frame: dict = {}
    for i, d in enumerate(dets):
        by_frame.setdefault(d.frame_index, []).append(i)
    return dets, by_frame


def build_tracklets(
    frames: Sequence[Sequence[Detection]], head: SingleFrameHead, cfg: TrackingConfig = TrackingConfig()
) -> list:
    dets, by_frame = _index(frames)
    if not dets:
        return []
    descs = head.embed(np.stack([d.conv_feature for d in dets]))
    alive = np.ones(len(dets), dtype=bool)
    # confidence descending, then (frame, det) ascending
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].frame_index, dets[i].det_index))
    tracklets = []
    for i in order:
        if len(tracklets) >= cfg.max_tracklets:
            break
        if not alive[i]:
            continue
        tracklets.append(
            _propagate(i, dets, descs, alive, by_frame, head, cfg.propagation_threshold, len(tracklets))
        )
    return tracklets


def build_training_tracklet(
    frames: Sequence[Sequence[Detection]],
    shop_desc: np.ndarray,
    head: SingleFrameHead,
    cfg: TrackingConfig = TrackingConfig(),
) -> Optional[Tracklet]:
    """Tracklet seeded at the detection matching the shop item best, or None."""
    dets, by_frame = _index(frames)
    if not dets:
        return None
    descs = head.embed(np.stack([d.conv_feature for d in dets]))
    scores = head.match(descs, np.broadcast_to(np.asarray(shop_desc).reshape(1, -1), descs.shape))
    # argmax returns the first maximum, i.e. the lowest (frame, det) in input order
    pivot = int(np.argmax(scores))
    if scores[pivot] < cfg.pivot_match_threshold:
        return None
    alive = np.ones(len(dets), dtype=bool)
    return _propagate(pivot, dets, descs, alive, by_frame, head, cfg.propagation_threshold, 0)


def average_iou(candidate: Tracklet, gt: Tracklet) -> float:
    """Mean IoU over ground-truth frames; a missing candidate box counts as 0."""
    mine = candidate.by_frame()
    total = 0.0
    for d in gt.detections:
        other = mine.get(d.frame_index)
        if other is not None:
            total += iou(other.bbox, d.bbox)
    return total / len(gt)


def select_eval_tracklet(tracklets: Sequence[Tracklet], gt: Tracklet) -> Tracklet:
    if not tracklets:
        raise ValueError("no candidate tracklets to select from")
    return min(tracklets, key=lambda t: (-average_iou(t, gt), t.id))


def tracklet_purity(
    tracklets: Sequence[Tracklet], identities: Sequence[str], frames: Optional[Sequence[Sequence[Detection]]] = None
) -> float:
    """Share of planted-identity detections sitting in their identity's tracklet.

    Each identity's tracklet is the one holding most of its detections (ties
    to the lowest id). Foreign detections inside those tracklets count against
    the score. With ``frames`` given, identity detections that no tracklet
    picked up count against it too.
    """
    wanted = set(identities)
    if not wanted:
        raise ValueError("no identities to score")
    counts: dict = {}
    for t in tracklets:
        for d in t.detections:
            if d.truth_id in wanted:
                counts.setdefault(d.truth_id, {}).setdefault(t.id, 0)
                counts[d.truth_id][t.id] += 1
    home = {who: min(c, key=lambda tid: (-c[tid], tid)) for who, c in counts.items()}
    total = sum(sum(c.values()) for c in counts.values())
    if frames is not None:
        total = sum(1 for d in _flatten(frames) if d.truth_id in wanted)
    correct = sum(counts[who][tid] for who, tid in home.items())
    home_ids = set(home.values())
    foreign = sum(
        1
        for t in tracklets
        if t.id in home_ids
        for d in t.detections
        if home.get(d.truth_id) != t.id
    )
    denom = total + foreign
    return correct / denom if denom else 1.0
