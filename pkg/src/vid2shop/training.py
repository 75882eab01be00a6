"""Single-frame pretraining and pseudo-labelled multi-frame training."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import NonFiniteError, ParamStore, Tape, Tensor, sgd_step
from .evaluation import rrs_sample, sample_frames
from .heads import HeadDims, Model, MultiFrameHead, SingleFrameHead, init_multi_from_single
from .tracking import TrackingConfig, build_training_tracklet
from .types import GalleryItem, SequenceRecord, Tracklet

VARIANT_MODES = {"seam": "seam", "seam_no_nlb": "no_nlb", "seam_no_nlb_no_g": "mean"}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    embed_dim: int = 256
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    T: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 8
    negatives_per_positive: int = 3
    seed: int = 0
    nlb_dim: int = 128
    variant: str = "seam"
    multi_weight: float = 1.0
    single_weight: float = 1.0
    tracking: TrackingConfig = field(default_factory=TrackingConfig)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.variant not in VARIANT_MODES:
            raise ValueError(f"unknown variant {self.variant!r}")


# -- pretraining -----------------------------------------------------------


def pairs_from_records(records: Sequence[SequenceRecord], gallery: Sequence[GalleryItem], negatives: int = 1, seed: int = 0) -> list:
    """(street feature, shop feature, label) pairs from annotated tracklets.

    Every ground-truth detection is paired with its item (label 1) and with
    ``negatives`` other items (label 0).
    """
    feats = {g.item_id: g.conv_feature for g in gallery}
    ids = [g.item_id for g in gallery]
    rng = np.random.default_rng(seed)
    pairs = []
    for rec in records:
        if rec.gt_tracklet is None:
            continue
        target = rec.target_item
        others = [i for i in ids if i not in rec.paired_item_ids]
        for det in rec.gt_tracklet.detections:
            pairs.append((det.conv_feature, feats[target], 1))
            for j in rng.choice(len(others), size=min(negatives, len(others)), replace=False):
                pairs.append((det.conv_feature, feats[others[j]], 0))
    return pairs


def pair_loss(tape: Tape, head: SingleFrameHead, a: np.ndarray, b: np.ndarray, labels: np.ndarray) -> Tensor:
    da = head.embed_t(tape, tape.constant(a))
    db = head.embed_t(tape, tape.constant(b))
    scores = head.match_t(tape, da, db)
    return tape.bce(scores, tape.constant(labels.reshape(-1, 1)))


def pair_accuracy(head: SingleFrameHead, a: np.ndarray, b: np.ndarray, labels: np.ndarray) -> float:
    scores = head.match(head.embed(a), head.embed(b))
    return float(np.mean((scores >= 0.5) == (labels == 1)))


def pretrain_single(
    pairs: Sequence[tuple],
    cfg: PretrainConfig = PretrainConfig(),
    head: Optional[SingleFrameHead] = None,
    history: Optional[list] = None,
) -> SingleFrameHead:
    """Fit ``f`` and ``m`` with binary cross-entropy on labelled feature pairs.

    ``history``, if given, receives ``(epoch, mean_loss, accuracy)`` per epoch.
    """
    if not pairs:
        raise ValueError("no training pairs")
    a = np.stack([p[0] for p in pairs])
    b = np.stack([p[1] for p in pairs])
    labels = np.array([p[2] for p in pairs], dtype=np.float64)
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    if labels.min() == labels.max():
        warnings.warn("all pretraining pairs share one label", RuntimeWarning, stacklevel=2)
    if head is None:
        head = SingleFrameHead.init(HeadDims(conv_dim=a.shape[1], embed_dim=cfg.embed_dim), cfg.seed)
    else:
        head = SingleFrameHead(head.params.copy())
    rng = np.random.default_rng(cfg.seed)
    n = len(labels)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            tape = Tape()
            loss = pair_loss(tape, head, a[idx], b[idx], labels[idx])
            tape.backward(loss)
            sgd_step(head.params, cfg.lr, cfg.momentum)
            total += float(loss.value[0, 0]) * len(idx)
        if history is not None:
            history.append((epoch, total / n, pair_accuracy(head, a, b, labels)))
    return head


# -- pseudo-labelled target training ----------------------------------------


@dataclass
class PseudoGroup:
    """One tracklet scored against its paired item and sampled negatives."""

    record_id: str
    tracklet: Tracklet
    item_ids: list
    labels: list


@dataclass
class PseudoBatch:
    groups: list
    skipped: int = 0

    @property
    def pairs(self) -> list:
        return [(g.tracklet, i, l) for g in self.groups for i, l in zip(g.item_ids, g.labels)]

    @property
    def positives(self) -> int:
        return sum(l for g in self.groups for l in g.labels)

    def detection_pairs(self) -> list:
        """Every tracklet detection paired with each of its group's items."""
        return [(d, i, l) for g in self.groups for d in g.tracklet.detections for i, l in zip(g.item_ids, g.labels)]


def make_pseudo_batch(
    records: Sequence[SequenceRecord],
    gallery: Sequence[GalleryItem],
    sf: SingleFrameHead,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> PseudoBatch:
    feats = {g.item_id: g.conv_feature for g in gallery}
    ids = [g.item_id for g in gallery]
    groups, skipped = [], 0
    for rec in records:
        frames, _ = sample_frames(rec, rrs_sample(rec.n_frames, cfg.T, rng))
        others = [i for i in ids if i not in rec.paired_item_ids]
        made = 0
        for target in rec.paired_item_ids:
            shop = sf.embed(feats[target])[0]
            tracklet = build_training_tracklet(frames, shop, sf, cfg.tracking)
            if tracklet is None:
                continue
            k = min(cfg.negatives_per_positive, len(others))
            negs = [others[j] for j in rng.choice(len(others), size=k, replace=False)] if k else []
            groups.append(PseudoGroup(rec.sequence_id, tracklet, [target, *negs], [1] + [0] * len(negs)))
            made += 1
        if made == 0:
            skipped += 1
    return PseudoBatch(groups, skipped)


def batch_loss(
    tape: Tape,
    groups: Sequence[PseudoGroup],
    item_features: dict,
    sf: SingleFrameHead,
    mf: MultiFrameHead,
    mode: str = "seam",
    multi_weight: float = 1.0,
    single_weight: float = 1.0,
) -> tuple:
    """(total, multi, single) losses: mean BCE over tracklet pairs and over detection pairs."""
    multi_terms, single_terms = [], []
    n_multi = n_single = 0
    for g in groups:
        c = tape.constant(g.tracklet.features())
        shop_feats = tape.constant(np.stack([item_features[i] for i in g.item_ids]))
        labels = np.asarray(g.labels, dtype=np.float64).reshape(-1, 1)
        n_items, t = len(g.item_ids), len(g.tracklet)

        agg = mf.aggregate_t(tape, mf.embed_t(tape, c), mode)
        tiled = tape.matmul(tape.constant(np.ones((n_items, 1))), agg)
        scores = mf.match_t(tape, tiled, mf.embed_t(tape, shop_feats))
        multi_terms.append(tape.bce(scores, tape.constant(labels), reduction="sum"))
        n_multi += n_items

        # every (detection, item) combination, detection-major
        pick_det = np.repeat(np.eye(t), n_items, axis=0)
        pick_item = np.tile(np.eye(n_items), (t, 1))
        dets = tape.matmul(tape.constant(pick_det), sf.embed_t(tape, c))
        shops = tape.matmul(tape.constant(pick_item), sf.embed_t(tape, shop_feats))
        s_scores = sf.match_t(tape, dets, shops)
        single_terms.append(tape.bce(s_scores, tape.constant(np.tile(labels, (t, 1))), reduction="sum"))
        n_single += t * n_items

    multi = _sum(tape, multi_terms)
    single = _sum(tape, single_terms)
    multi = tape.scale(multi, 1.0 / n_multi)
    single = tape.scale(single, 1.0 / n_single)
    total = tape.add(tape.scale(multi, multi_weight), tape.scale(single, single_weight))
    return total, multi, single


def _sum(tape: Tape, terms: list) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = tape.add(out, t)
    return out


@dataclass
class EpochLog:
    epoch: int
    multi_loss: float
    single_loss: float
    positives: int
    skipped_records: int


@dataclass
class TrainResult:
    model: Model
    history: list


def train_target(
    records: Sequence[SequenceRecord],
    gallery: Sequence[GalleryItem],
    sf: SingleFrameHead,
    cfg: TrainConfig = TrainConfig(),
) -> TrainResult:
    """Train the multi-frame head on pseudo-labels while fine-tuning the single-frame head.

    The caller's ``sf`` is not modified. Conv features are inputs only, so the
    detector stays frozen by construction.
    """
    mf0 = init_multi_from_single(sf, seed=cfg.seed, nlb_dim=cfg.nlb_dim)
    store: ParamStore = sf.params.merged(mf0.params)
    sf_t, mf_t = SingleFrameHead(store), MultiFrameHead(store)
    item_features = {g.item_id: g.conv_feature for g in gallery}
    mode = VARIANT_MODES[cfg.variant]
    rng = np.random.default_rng(cfg.seed)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(records))
        sums = {"multi": 0.0, "single": 0.0, "n": 0}
        positives = skipped = 0
        for start in range(0, len(order), cfg.batch_size):
            batch_records = [records[i] for i in order[start : start + cfg.batch_size]]
            batch = make_pseudo_batch(batch_records, gallery, sf_t, cfg, rng)
            skipped += batch.skipped
            positives += batch.positives
            step += 1
            if not batch.groups:
                continue
            tape = Tape()
            try:
                total, multi, single = batch_loss(
                    tape, batch.groups, item_features, sf_t, mf_t, mode, cfg.multi_weight, cfg.single_weight
                )
                tape.backward(total)
                sgd_step(store, cfg.lr, cfg.momentum)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite loss at step {step} (epoch {epoch}): {exc}") from exc
            sums["multi"] += float(multi.value[0, 0]) * len(batch.groups)
            sums["single"] += float(single.value[0, 0]) * len(batch.groups)
            sums["n"] += len(batch.groups)
        n = max(sums["n"], 1)
        history.append(EpochLog(epoch, sums["multi"] / n, sums["single"] / n, positives, skipped))
    model = Model(SingleFrameHead(store.subset("sf.")), MultiFrameHead(store.subset("mf.")))
    return TrainResult(model, history)


# -- gradient verification ---------------------------------------------------


def end_to_end_grad_check(
    seed: int = 0,
    T: int = 4,
    conv_dim: int = 32,
    embed_dim: int = 16,
    nlb_dim: int = 8,
    n_items: int = 3,
    tol: float = 1e-4,
    eps: float = 1e-5,
):
    """Finite-difference check of the combined training loss on a random tracklet.

    Every parameter is drawn at random, including the NLB output transform
    that training starts at zero, so that no gradient is trivially zero.
    """
    from .autodiff import grad_check
    from .types import BBox, Detection

    rng = np.random.default_rng(seed)
    sf = SingleFrameHead.init(HeadDims(conv_dim, embed_dim, nlb_dim), seed)
    mf = init_multi_from_single(sf, seed=seed, nlb_dim=nlb_dim)
    store = sf.params.merged(mf.params)
    for name in store.names():
        store[name] = rng.normal(0.0, 0.3, store[name].shape)
    sf_t, mf_t = SingleFrameHead(store), MultiFrameHead(store)
    box = BBox(0.0, 0.0, 10.0, 10.0)
    dets = tuple(Detection(t, 0, box, 0.9, rng.standard_normal(conv_dim)) for t in range(T))
    items = {f"i{j}": rng.standard_normal(conv_dim) for j in range(n_items)}
    group = PseudoGroup("check", Tracklet(0, dets), list(items), [1] + [0] * (n_items - 1))

    def loss_fn(tape, params):
        return batch_loss(tape, [group], items, sf_t, mf_t, "seam")[0]

    return grad_check(loss_fn, store, eps=eps, tol=tol)
