import numpy as np
import pytest

from vid2shop.attention import (
    attention_trace,
    curve_argmax,
    percentile_curve,
    percentile_indices,
    record_weights,
)
from vid2shop.heads import HeadDims, SingleFrameHead, init_multi_from_single
from vid2shop.synthetic import SynthConfig, generate_dataset, generate_gallery
from vid2shop.types import SequenceRecord, Tracklet
from helpers import make_det


def random_head(conv_dim=6, seed=0):
    sf = SingleFrameHead.init(HeadDims(conv_dim, 5), seed)
    mf = init_multi_from_single(sf, seed=seed, nlb_dim=3)
    rng = np.random.default_rng(seed)
    for name in mf.params.names():
        mf.params[name] = rng.normal(0, 0.5, mf.params[name].shape)
    return mf


def _record(feats, visible=None):
    dets = [make_det(t, 0, f, truth="a") for t, f in enumerate(feats)]
    frames = tuple((d,) for d in dets)
    gt = [d for t, d in enumerate(dets) if visible is None or t in visible]
    return SequenceRecord("s", ("a",), frames, Tracklet(0, tuple(gt)) if gt else None)


def test_trace_of_single_detection():
    head = random_head()
    t = Tracklet(0, (make_det(7, 0, np.ones(6)),))
    assert attention_trace(t, head) == [(7, 1.0)]


def test_trace_sums_to_one_in_frame_order():
    rng = np.random.default_rng(1)
    t = Tracklet(0, tuple(make_det(2 * i, 0, rng.standard_normal(6)) for i in range(5)))
    trace = attention_trace(t, random_head())
    assert [f for f, _ in trace] == [0, 2, 4, 6, 8]
    assert sum(w for _, w in trace) == pytest.approx(1.0, abs=1e-12)


def test_percentile_indices():
    assert percentile_indices(21) == list(range(21))
    assert percentile_indices(41) == list(range(0, 41, 2))
    assert percentile_indices(1) == [0] * 21
    idx = percentile_indices(30)
    assert idx[0] == 0 and idx[-1] == 29 and idx == sorted(idx)
    with pytest.raises(ValueError):
        percentile_indices(0)


def test_identical_frames_give_flat_curve():
    f = np.arange(6, dtype=float)
    records = [_record([f] * n) for n in (21, 30, 50)]
    curve = percentile_curve(records, random_head())
    assert len(curve) == 21
    for p, point in enumerate(curve):
        assert point.percentile == pytest.approx(5.0 * p)
        assert point.mean == pytest.approx(1 / 21, abs=1e-12)
        assert point.std == pytest.approx(0.0, abs=1e-12)
        assert point.n == 3


def test_record_weights_mark_missing_frames():
    rng = np.random.default_rng(0)
    rec = _record(list(rng.standard_normal((21, 6))), visible={0, 5, 6, 20})
    w = record_weights(rec, random_head())
    assert np.isnan(w).sum() == 17
    assert np.nansum(w) == pytest.approx(1.0, abs=1e-12)
    assert not np.isnan(w[[0, 5, 6, 20]]).any()


def test_curve_on_synthetic_records():
    cfg = SynthConfig(gallery_size=10, n_sequences=6, frames_per_sequence=25, feature_dim=6, seed=3)
    _, protos = generate_gallery(cfg)
    curve = percentile_curve(generate_dataset(cfg, protos), random_head())
    assert all(0 < c.mean < 1 for c in curve if c.n)
    assert 0 <= curve_argmax(curve) < 21


def test_curve_needs_ground_truth():
    rec = SequenceRecord("s", ("a",), ((make_det(0, 0, np.zeros(6)),),), None)
    with pytest.raises(ValueError):
        percentile_curve([rec], random_head())
    with pytest.raises(ValueError):
        record_weights(rec, random_head())
