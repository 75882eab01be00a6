"""Frame sampling, gallery ranking, baselines and top-K evaluation."""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .heads import Model
from .tracking import TrackingConfig, build_tracklets, select_eval_tracklet
from .types import GalleryItem, Ranking, SequenceRecord, Tracklet

METHODS = (
    "seam",
    "seam_no_nlb",
    "seam_no_nlb_no_g",
    "max_confidence",
    "max_matching",
    "avg_distance",
    "avg_descriptor",
)

_MULTI_MODES = {"seam": "seam", "seam_no_nlb": "no_nlb", "seam_no_nlb_no_g": "mean"}


@dataclass(frozen=True)
class EvalConfig:
    T: int = 10
    ks: tuple = (1, 5, 10, 20)
    method: str = "seam"
    pool_size: int = 800
    repeats: int = 20
    seed: int = 0
    class_filter: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.T < 1:
            raise ValueError("T must be positive")


def record_rng(seed: int, key: str) -> np.random.Generator:
    """Generator that depends only on (seed, key), never on processing order."""
    return np.random.default_rng([seed, zlib.crc32(key.encode("utf-8"))])


def rrs_sample(n: int, t: int, rng) -> np.ndarray:
    """Restricted random sampling: one uniform index from each of ``t`` chunks.

    ``[0, n)`` is cut at ``floor(i * n / t)``. When ``n < t`` the chunks are
    single frames reused in order, so every frame appears and the result is
    non-decreasing.
    """
    if n < 1 or t < 1:
        raise ValueError(f"need n >= 1 and t >= 1, got n={n}, t={t}")
    if n < t:
        return (np.arange(t) * n) // t
    rng = np.random.default_rng(rng)
    bounds = (np.arange(t + 1) * n) // t
    return rng.integers(bounds[:-1], bounds[1:])


def sample_frames(record: SequenceRecord, indices) -> tuple:
    """Frames at ``indices``, renumbered 0..len-1, with the matching gt subset."""
    frames = []
    gt_dets = []
    gt_by_frame = record.gt_tracklet.by_frame() if record.gt_tracklet is not None else {}
    for pos, src in enumerate(int(i) for i in indices):
        frames.append(tuple(replace(d, frame_index=pos) for d in record.frames[src]))
        if src in gt_by_frame:
            gt_dets.append(replace(gt_by_frame[src], frame_index=pos))
    gt = None
    if gt_dets:
        pivot = max(range(len(gt_dets)), key=lambda i: (gt_dets[i].confidence, -i))
        gt = Tracklet(record.gt_tracklet.id, tuple(gt_dets), pivot)
    return tuple(frames), gt


class GalleryIndex:
    """Gallery features with per-head descriptors computed once."""

    def __init__(self, gallery: Sequence[GalleryItem], model: Model):
        self.items = list(gallery)
        self.item_ids = [g.item_id for g in self.items]
        self.classes = [g.class_label for g in self.items]
        self.position = {g.item_id: i for i, g in enumerate(self.items)}
        if self.items:
            feats = np.stack([g.conv_feature for g in self.items])
        else:
            feats = np.zeros((0, model.single.dims.conv_dim))
        self.features = feats
        self.single = model.single.embed(feats)
        self.multi = model.multi.embed(feats)

    def __len__(self):
        return len(self.items)

    def subset(self, class_label: str) -> "GalleryIndex":
        keep = [i for i, c in enumerate(self.classes) if c == class_label]
        sub = object.__new__(GalleryIndex)
        sub.items = [self.items[i] for i in keep]
        sub.item_ids = [self.item_ids[i] for i in keep]
        sub.classes = [self.classes[i] for i in keep]
        sub.position = {iid: j for j, iid in enumerate(sub.item_ids)}
        sub.features = self.features[keep]
        sub.single = self.single[keep]
        sub.multi = self.multi[keep]
        return sub


def score_gallery(tracklet: Tracklet, index: GalleryIndex, model: Model, method: str) -> np.ndarray:
    """Matching score of the tracklet against every gallery item, in gallery order."""
    if tracklet is None or len(tracklet) == 0:
        raise ValueError("cannot rank an empty tracklet")
    n = len(index)
    feats = tracklet.features()
    if method in _MULTI_MODES:
        q = model.multi.describe_tracklet(feats, _MULTI_MODES[method])
        return model.multi.match(np.broadcast_to(q, (n, q.size)), index.multi)
    sf = model.single
    if method == "max_confidence":
        best = max(range(len(tracklet)), key=lambda i: (tracklet.detections[i].confidence, -i))
        q = sf.embed(feats[best])[0]
        return sf.match(np.broadcast_to(q, (n, q.size)), index.single)
    if method == "avg_descriptor":
        q = sf.embed(feats).mean(axis=0)
        return sf.match(np.broadcast_to(q, (n, q.size)), index.single)
    if method in ("max_matching", "avg_distance"):
        descs = sf.embed(feats)
        per_frame = np.stack([sf.match(np.broadcast_to(d, (n, d.size)), index.single) for d in descs])
        return per_frame.max(axis=0) if method == "max_matching" else per_frame.mean(axis=0)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def rank_gallery(tracklet: Tracklet, gallery, model: Model, method: str, query_id: str = "") -> Ranking:
    index = gallery if isinstance(gallery, GalleryIndex) else GalleryIndex(gallery, model)
    scores = score_gallery(tracklet, index, model, method)
    return Ranking.from_scores(query_id, index.item_ids, scores)


# -- query pipeline --------------------------------------------------------


@dataclass
class QueryResult:
    query_id: str
    target_item: str
    class_label: str
    rank: Optional[int]
    ranking: Optional[Ranking] = None
    tracklet: Optional[Tracklet] = field(default=None, repr=False)

    def hit(self, k: int) -> bool:
        return self.rank is not None and self.rank <= k


def query_tracklet(
    record: SequenceRecord, model: Model, T: int, seed: int, tracking: TrackingConfig = TrackingConfig()
) -> Optional[Tracklet]:
    """RRS-sample T frames, track them, and keep the tracklet closest to the ground truth."""
    rng = record_rng(seed, record.sequence_id)
    frames, gt = sample_frames(record, rrs_sample(record.n_frames, T, rng))
    tracklets = build_tracklets(frames, model.single, tracking)
    if not tracklets:
        return None
    if gt is None:
        # nothing to align against: fall back to the first (most confident) tracklet
        return tracklets[0]
    return select_eval_tracklet(tracklets, gt)


def evaluate_records(
    records: Sequence[SequenceRecord],
    gallery: Sequence[GalleryItem],
    model: Model,
    cfg: EvalConfig = EvalConfig(),
    tracking: TrackingConfig = TrackingConfig(),
    jobs: int = 1,
    keep_rankings: bool = False,
    index: Optional[GalleryIndex] = None,
) -> list:
    """One query per record; results come back in record order whatever ``jobs`` is."""
    index = index if index is not None else GalleryIndex(gallery, model)
    class_of = dict(zip(index.item_ids, index.classes))

    def run(record: SequenceRecord) -> QueryResult:
        target = record.target_item
        cls = class_of.get(target, "")
        tracklet = query_tracklet(record, model, cfg.T, cfg.seed, tracking)
        if tracklet is None:
            return QueryResult(record.sequence_id, target, cls, None)
        idx = index.subset(cls) if cfg.class_filter and cls else index
        ranking = rank_gallery(tracklet, idx, model, cfg.method, record.sequence_id)
        return QueryResult(
            record.sequence_id,
            target,
            cls,
            ranking.rank_of(target),
            ranking if keep_rankings else None,
            tracklet,
        )

    if jobs <= 1:
        return [run(r) for r in records]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run, records))


# -- metrics ---------------------------------------------------------------


def topk_accuracy(rankings: Sequence[Ranking], ground_truth: dict, ks: Sequence[int]) -> list:
    """Fraction of rankings whose ground-truth item sits within the first k."""
    if not rankings:
        return [0.0 for _ in ks]
    ranks = [r.rank_of(ground_truth[r.query_id]) for r in rankings]
    return _topk_from_ranks(ranks, ks)


def _topk_from_ranks(ranks: Sequence[Optional[int]], ks: Sequence[int]) -> list:
    n = len(ranks)
    return [sum(1 for r in ranks if r is not None and r <= k) / n for k in ks]


@dataclass(frozen=True)
class BootstrapResult:
    k: int
    mean: float
    std: float
    n_queries: int


def bootstrap_eval(
    queries: Sequence[QueryResult], ks: Sequence[int], pool_size: int = 800, repeats: int = 20, seed: int = 0
) -> list:
    """Top-k accuracy averaged over ``repeats`` subsamples of ``pool_size`` queries.

    Subsamples are drawn without replacement; std is the population std
    across repeats.
    """
    if not queries:
        raise ValueError("no queries to evaluate")
    rng = np.random.default_rng(seed)
    n = len(queries)
    pool = min(pool_size, n)
    ranks = [q.rank for q in queries]
    table = []
    for _ in range(repeats):
        pick = rng.choice(n, size=pool, replace=False)
        table.append(_topk_from_ranks([ranks[i] for i in pick], ks))
    arr = np.asarray(table)
    return [
        BootstrapResult(k, float(arr[:, j].mean()), float(arr[:, j].std()), pool) for j, k in enumerate(ks)
    ]


@dataclass(frozen=True)
class ClassRow:
    class_label: str
    k: int
    mean: float
    std: float
    n_queries: int


def per_class_report(
    queries: Sequence[QueryResult],
    gallery: Sequence[GalleryItem],
    ks: Sequence[int] = (1,),
    pool_size: int = 800,
    repeats: int = 20,
    seed: int = 0,
) -> list:
    """Top-k accuracy per clothing class over the bootstrap pools.

    Classes with no queries are left out. Rows follow the gallery's class
    order of first appearance.
    """
    if not queries:
        return []
    order = []
    for g in gallery:
        if g.class_label not in order:
            order.append(g.class_label)
    for q in queries:
        if q.class_label not in order:
            order.append(q.class_label)
    rng = np.random.default_rng(seed)
    n = len(queries)
    pool = min(pool_size, n)
    per_class: dict = {c: [] for c in order}
    for _ in range(repeats):
        pick = rng.choice(n, size=pool, replace=False)
        groups: dict = {}
        for i in pick:
            groups.setdefault(queries[i].class_label, []).append(queries[i].rank)
        for c, ranks in groups.items():
            per_class[c].append(_topk_from_ranks(ranks, ks))
    rows = []
    counts: dict = {}
    for q in queries:
        counts[q.class_label] = counts.get(q.class_label, 0) + 1
    for c in order:
        if not per_class[c]:
            continue
        arr = np.asarray(per_class[c])
        for j, k in enumerate(ks):
            rows.append(ClassRow(c, k, float(arr[:, j].mean()), float(arr[:, j].std()), counts[c]))
    return rows
