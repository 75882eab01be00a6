"""Synthetic street/shop data with planted identities.

Each gallery item has a hidden unit-norm prototype. A street detection of
item ``j`` has conv feature ``v * (prototype_j + offset) + noise`` where ``v``
is the frame's visibility and ``offset`` is fixed for the whole sequence
(size ``instance_sigma``); its shop image is ``prototype_j`` plus a quarter of the
noise. Noise is drawn per coordinate with std ``noise_sigma / sqrt(D)`` so
its expected norm is ``noise_sigma`` whatever the feature size.

All prototypes share a common direction (the normalised all-ones vector),
standing in for the positive mean of real backbone activations; it makes a
frame's visibility linearly readable from its feature.

With ``clutter > 0`` a partly visible box also picks up
``clutter * (1 - v) * background`` where ``background`` is a unit vector drawn
once per sequence around a shared background direction (alternating signs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .evaluation import record_rng
from .types import CLOTHING_CLASSES, BBox, Detection, GalleryItem, Ranking, SequenceRecord, Tracklet

FRAME_W, FRAME_H = 640.0, 480.0


@dataclass(frozen=True)
class SynthConfig:
    gallery_size: int = 200
    n_classes: int = 13
    n_sequences: int = 100
    frames_per_sequence: int = 30
    feature_dim: int = 64
    noise_sigma: float = 0.5
    distractor_rate: float = 0.5
    occlusion_rate: float = 0.1
    seed: int = 0
    visibility: tuple = (0.3, 1.0)
    # (start, end) as fractions of the sequence: visibility is max inside, min outside
    signal_window: Optional[tuple] = None
    common_weight: float = 0.5
    # per-sequence appearance offset shared by all frames of one wearer
    instance_sigma: float = 0.0
    # weight of the background clutter that fills a box as visibility drops
    clutter: float = 0.0

    def __post_init__(self):
        for name in ("gallery_size", "n_classes", "n_sequences", "frames_per_sequence", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_classes > len(CLOTHING_CLASSES):
            raise ValueError(f"at most {len(CLOTHING_CLASSES)} classes")
        if self.noise_sigma < 0 or self.instance_sigma < 0:
            raise ValueError("noise_sigma and instance_sigma must be non-negative")
        for name in ("distractor_rate", "occlusion_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


def item_id(i: int) -> str:
    return f"item{i:05d}"


def generate_gallery(cfg: SynthConfig) -> tuple:
    """Gallery items and the hidden ``{item_id: prototype}`` table."""
    rng = record_rng(cfg.seed, "gallery")
    d = cfg.feature_dim
    common = np.full(d, 1.0 / math.sqrt(d))
    raw = rng.standard_normal((cfg.gallery_size, d))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    protos = cfg.common_weight * common + raw
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    shop_noise = rng.standard_normal((cfg.gallery_size, d)) * (cfg.noise_sigma / 4.0 / math.sqrt(d))
    items, table = [], {}
    for i in range(cfg.gallery_size):
        iid = item_id(i)
        table[iid] = protos[i]
        cls = CLOTHING_CLASSES[i % cfg.n_classes]
        items.append(GalleryItem(iid, cls, protos[i] + shop_noise[i]))
    return items, table


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x)


def background_direction(d: int) -> np.ndarray:
    return _unit(np.where(np.arange(d) % 2 == 0, 1.0, -1.0))


def _visibility(cfg: SynthConfig, rng, t: int, n: int) -> float:
    lo, hi = cfg.visibility
    if cfg.signal_window is None:
        return float(rng.uniform(lo, hi))
    start, end = cfg.signal_window
    return hi if start <= t / n < end else lo


class _Walker:
    """Smooth random walk of one object's box."""

    def __init__(self, rng):
        self.rng = rng
        self.cx = rng.uniform(0.3, 0.7) * FRAME_W
        self.cy = rng.uniform(0.3, 0.7) * FRAME_H
        self.w = rng.uniform(80, 160)
        self.h = rng.uniform(120, 240)

    def step(self) -> BBox:
        rng = self.rng
        self.cx = float(np.clip(self.cx + rng.normal(0, 4), self.w / 2, FRAME_W - self.w / 2))
        self.cy = float(np.clip(self.cy + rng.normal(0, 4), self.h / 2, FRAME_H - self.h / 2))
        self.w = float(np.clip(self.w * math.exp(rng.normal(0, 0.03)), 40, 240))
        self.h = float(np.clip(self.h * math.exp(rng.normal(0, 0.03)), 60, 320))
        return _box(self.cx, self.cy, self.w, self.h)


def _box(cx, cy, w, h) -> BBox:
    x1 = max(0.0, cx - w / 2)
    y1 = max(0.0, cy - h / 2)
    x2 = min(FRAME_W, cx + w / 2)
    y2 = min(FRAME_H, cy + h / 2)
    return BBox(x1, y1, x2, y2)


def _random_box(rng) -> BBox:
    w, h = rng.uniform(40, 200), rng.uniform(60, 280)
    return _box(rng.uniform(w / 2, FRAME_W - w / 2), rng.uniform(h / 2, FRAME_H - h / 2), w, h)


def generate_sequence(
    item: str,
    prototypes: dict,
    cfg: SynthConfig,
    sequence_id: str,
    companions: Sequence[str] = (),
) -> SequenceRecord:
    """One street sequence of ``item`` (plus optional co-visible ``companions``).

    The ground-truth tracklet collects the detections of ``item``. Every
    detection carries ``truth_id`` so identity purity can be scored.
    """
    rng = record_rng(cfg.seed, sequence_id)
    d = cfg.feature_dim
    sigma = cfg.noise_sigma / math.sqrt(d)
    ids = list(prototypes)
    wearers = [item, *companions]
    walkers = {w: _Walker(rng) for w in wearers}
    offsets = {w: rng.standard_normal(d) * (cfg.instance_sigma / math.sqrt(d)) for w in wearers}
    background = _unit(background_direction(d) + _unit(rng.standard_normal(d)))
    others = [i for i in ids if i not in wearers]
    n = cfg.frames_per_sequence
    frames, gt = [], []
    for t in range(n):
        raw = []
        for who in wearers:
            box = walkers[who].step()
            if rng.random() < cfg.occlusion_rate:
                continue
            v = _visibility(cfg, rng, t, n)
            feat = v * (prototypes[who] + offsets[who]) + rng.standard_normal(d) * sigma
            feat += cfg.clutter * (1.0 - v) * background
            conf = float(np.clip(0.5 + 0.45 * v + rng.normal(0, 0.03), 0.0, 1.0))
            raw.append((box, conf, feat, who))
        for _ in range(rng.poisson(cfg.distractor_rate) if others else 0):
            who = others[rng.integers(len(others))]
            v = rng.uniform(*cfg.visibility)
            offset = rng.standard_normal(d) * (cfg.instance_sigma / math.sqrt(d))
            feat = v * (prototypes[who] + offset) + rng.standard_normal(d) * sigma
            feat += cfg.clutter * (1.0 - v) * background
            raw.append((_random_box(rng), float(rng.uniform(0.2, 0.7)), feat, who))
        order = rng.permutation(len(raw))
        frame = []
        for k, j in enumerate(order):
            box, conf, feat, who = raw[j]
            det = Detection(t, k, box, conf, feat, truth_id=who)
            frame.append(det)
            if who == item:
                gt.append(det)
        frames.append(tuple(frame))
    gt_tracklet = None
    if gt:
        pivot = max(range(len(gt)), key=lambda i: (gt[i].confidence, -i))
        gt_tracklet = Tracklet(0, tuple(gt), pivot)
    return SequenceRecord(sequence_id, tuple(wearers), tuple(frames), gt_tracklet)


def generate_dataset(
    cfg: SynthConfig, prototypes: dict, n: Optional[int] = None, start: int = 0, prefix: str = "seq"
) -> list:
    """``n`` sequences, each paired with one item drawn from its own sub-seed."""
    ids = list(prototypes)
    out = []
    for i in range(start, start + (cfg.n_sequences if n is None else n)):
        sid = f"{prefix}{i:06d}"
        pick = record_rng(cfg.seed, "pair:" + sid).integers(len(ids))
        out.append(generate_sequence(ids[pick], prototypes, cfg, sid))
    return out


def split_by_class(records: Sequence[SequenceRecord], gallery: Sequence[GalleryItem], train_fraction: float = 0.9, seed: int = 0) -> tuple:
    """Stratified split: within every class, round(train_fraction * n) go to train."""
    class_of = {g.item_id: g.class_label for g in gallery}
    groups: dict = {}
    for r in records:
        groups.setdefault(class_of[r.target_item], []).append(r)
    rng = np.random.default_rng(seed)
    train_ids, test_ids = set(), set()
    for cls in sorted(groups):
        members = sorted(groups[cls], key=lambda r: r.sequence_id)
        perm = rng.permutation(len(members))
        cut = int(round(train_fraction * len(members)))
        train_ids.update(members[i].sequence_id for i in perm[:cut])
        test_ids.update(members[i].sequence_id for i in perm[cut:])
    train = [r for r in records if r.sequence_id in train_ids]
    test = [r for r in records if r.sequence_id in test_ids]
    return train, test


def oracle_scores(tracklet: Tracklet, item_ids: Sequence[str], prototypes: dict) -> np.ndarray:
    """1 / (1 + mean distance between the prototype and the tracklet's features)."""
    feats = tracklet.features()
    protos = np.stack([prototypes[i] for i in item_ids])
    dist = np.linalg.norm(feats[None, :, :] - protos[:, None, :], axis=2).mean(axis=1)
    return 1.0 / (1.0 + dist)


def oracle_rank(tracklet: Tracklet, gallery: Sequence[GalleryItem], prototypes: dict, query_id: str = "") -> Ranking:
    """Ranking from the hidden prototypes; never touches a learned head."""
    ids = [g.item_id for g in gallery]
    return Ranking.from_scores(query_id, ids, oracle_scores(tracklet, ids, prototypes))


def source_domain(cfg: SynthConfig, n_sequences: int, seed_offset: int = 1000) -> tuple:
    """An annotated image domain with its own items, for single-frame pretraining."""
    src = replace(cfg, seed=cfg.seed + seed_offset, signal_window=None)
    gallery, protos = generate_gallery(src)
    records = generate_dataset(src, protos, n=n_sequences, prefix="src")
    return gallery, records
