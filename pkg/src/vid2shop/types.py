"""Domain types shared by every stage of the video-to-shop pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

# DeepFashion2 taxonomy, the label space of shop items.
CLOTHING_CLASSES = (
    "short_sleeve_top",
    "long_sleeve_top",
    "short_sleeve_outwear",
    "long_sleeve_outwear",
    "vest",
    "sling",
    "shorts",
    "trousers",
    "skirt",
    "short_sleeve_dress",
    "long_sleeve_dress",
    "vest_dress",
    "sling_dress",
)


def _frozen_vector(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite bbox coordinates {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate bbox {coords}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list:
        return [self.x1, self.y1, self.x2, self.y2]


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes, 0.0 when they do not overlap."""
    if a == b:
        return 1.0
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True, eq=False)
class Detection:
    """One candidate box in one frame, with the backbone feature of its RoI.

    ``truth_id`` is only set by the synthetic generator; real detections carry
    no identity.
    """

    frame_index: int
    det_index: int
    bbox: BBox
    confidence: float
    conv_feature: np.ndarray
    truth_id: Optional[str] = None

    def __post_init__(self):
        if self.frame_index < 0 or self.det_index < 0:
            raise ValueError("frame_index and det_index must be non-negative")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        feat = _frozen_vector(self.conv_feature)
        if not np.all(np.isfinite(feat)):
            raise ValueError("conv_feature has non-finite entries")
        object.__setattr__(self, "conv_feature", feat)

    @property
    def key(self) -> tuple:
        return (self.frame_index, self.det_index)

    def same_as(self, other: "Detection") -> bool:
        return (
            self.frame_index == other.frame_index
            and self.det_index == other.det_index
            and self.bbox == other.bbox
            and self.confidence == other.confidence
            and self.truth_id == other.truth_id
            and np.array_equal(self.conv_feature, other.conv_feature)
        )


@dataclass(frozen=True, eq=False)
class Tracklet:
    """Detections of one object, at most one per frame, ordered by frame."""

    id: int
    detections: tuple
    pivot: int = 0

    def __post_init__(self):
        dets = tuple(self.detections)
        object.__setattr__(self, "detections", dets)
        if not dets:
            raise ValueError("tracklet must contain at least one detection")
        frames = [d.frame_index for d in dets]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError(f"tracklet {self.id}: frame indices not strictly increasing: {frames}")
        if not 0 <= self.pivot < len(dets):
            raise ValueError(f"tracklet {self.id}: pivot {self.pivot} out of range")

    def __len__(self) -> int:
        return len(self.detections)

    @property
    def pivot_detection(self) -> Detection:
        return self.detections[self.pivot]

    @property
    def frame_indices(self) -> list:
        return [d.frame_index for d in self.detections]

    def features(self) -> np.ndarray:
        return np.stack([d.conv_feature for d in self.detections])

    def by_frame(self) -> dict:
        return {d.frame_index: d for d in self.detections}

    def same_as(self, other: "Tracklet") -> bool:
        return (
            self.id == other.id
            and self.pivot == other.pivot
            and len(self) == len(other)
            and all(a.same_as(b) for a, b in zip(self.detections, other.detections))
        )


@dataclass(frozen=True, eq=False)
class GalleryItem:
    item_id: str
    class_label: str
    conv_feature: np.ndarray

    def __post_init__(self):
        if self.class_label not in CLOTHING_CLASSES:
            raise ValueError(f"unknown clothing class {self.class_label!r}")
        object.__setattr__(self, "conv_feature", _frozen_vector(self.conv_feature))

    def same_as(self, other: "GalleryItem") -> bool:
        return (
            self.item_id == other.item_id
            and self.class_label == other.class_label
            and np.array_equal(self.conv_feature, other.conv_feature)
        )


@dataclass(frozen=True, eq=False)
class SequenceRecord:
    """A street video (as detections per frame) paired with its shop items."""

    sequence_id: str
    paired_item_ids: tuple
    frames: tuple
    gt_tracklet: Optional[Tracklet] = None

    def __post_init__(self):
        object.__setattr__(self, "paired_item_ids", tuple(self.paired_item_ids))
        object.__setattr__(self, "frames", tuple(tuple(f) for f in self.frames))
        if not self.paired_item_ids:
            raise ValueError(f"sequence {self.sequence_id}: no paired items")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def target_item(self) -> str:
        return self.paired_item_ids[0]

    def detections(self) -> list:
        return [d for frame in self.frames for d in frame]

    def same_as(self, other: "SequenceRecord") -> bool:
        if (
            self.sequence_id != other.sequence_id
            or self.paired_item_ids != other.paired_item_ids
            or len(self.frames) != len(other.frames)
        ):
            return False
        for fa, fb in zip(self.frames, other.frames):
            if len(fa) != len(fb) or not all(a.same_as(b) for a, b in zip(fa, fb)):
                return False
        if (self.gt_tracklet is None) != (other.gt_tracklet is None):
            return False
        return self.gt_tracklet is None or self.gt_tracklet.same_as(other.gt_tracklet)


def check_gallery_refs(records: Sequence[SequenceRecord], gallery: Sequence[GalleryItem]) -> None:
    known = {g.item_id for g in gallery}
    for rec in records:
        missing = [i for i in rec.paired_item_ids if i not in known]
        if missing:
            raise ValueError(f"sequence {rec.sequence_id}: unknown gallery items {missing}")


@dataclass(frozen=True)
class Ranking:
    """Gallery ids sorted by descending score, ties by ascending item id."""

    query_id: str
    entries: tuple = field(default_factory=tuple)

    def __post_init__(self):
        entries = tuple((str(i), float(s)) for i, s in self.entries)
        object.__setattr__(self, "entries", entries)
        ids = [i for i, _ in entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"ranking {self.query_id}: duplicate item ids")
        scores = [s for _, s in entries]
        if any(b > a for a, b in zip(scores, scores[1:])):
            raise ValueError(f"ranking {self.query_id}: scores not sorted descending")

    @classmethod
    def from_scores(cls, query_id: str, item_ids: Sequence[str], scores) -> "Ranking":
        pairs = sorted(zip(item_ids, (float(s) for s in scores)), key=lambda p: (-p[1], p[0]))
        return cls(query_id, tuple(pairs))

    @property
    def item_ids(self) -> list:
        return [i for i, _ in self.entries]

    def rank_of(self, item_id: str) -> Optional[int]:
        """1-based position of ``item_id``, None when absent."""
        for pos, (i, _) in enumerate(self.entries):
            if i == item_id:
                return pos + 1
        return None

    def __len__(self) -> int:
        return len(self.entries)
