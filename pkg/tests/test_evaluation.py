import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from vid2shop.evaluation import (
    METHODS,
    EvalConfig,
    GalleryIndex,
    QueryResult,
    bootstrap_eval,
    evaluate_records,
    per_class_report,
    rank_gallery,
    record_rng,
    rrs_sample,
    sample_frames,
    topk_accuracy,
)
from vid2shop.heads import HeadDims, Model, SingleFrameHead, init_multi_from_single
from vid2shop.synthetic import SynthConfig, generate_dataset, generate_gallery
from vid2shop.types import CLOTHING_CLASSES, Detection, GalleryItem, Ranking, Tracklet
from helpers import make_det


def random_model(conv_dim=8, seed=0):
    sf = SingleFrameHead.init(HeadDims(conv_dim, 6, 3), seed)
    mf = init_multi_from_single(sf, seed=seed, nlb_dim=3)
    rng = np.random.default_rng(seed + 100)
    for name in mf.params.names():
        mf.params[name] = rng.normal(0, 0.5, mf.params[name].shape)
    return Model(sf, mf)


def random_gallery(rng, k, dim=8):
    return [GalleryItem(f"g{i:03d}", CLOTHING_CLASSES[i % 13], rng.standard_normal(dim)) for i in range(k)]


def random_tracklet(rng, t, dim=8):
    dets = tuple(make_det(i, 0, rng.standard_normal(dim), conf=float(rng.uniform(0.1, 1))) for i in range(t))
    return Tracklet(0, dets)


# -- RRS -----------------------------------------------------------------


def test_rrs_identity_when_n_equals_t():
    assert list(rrs_sample(10, 10, 0)) == list(range(10))


def test_rrs_two_frame_chunks():
    for seed in range(20):
        idx = rrs_sample(20, 10, seed)
        for i, v in enumerate(idx):
            assert v in (2 * i, 2 * i + 1)


def test_rrs_short_sequence_repeats_every_frame():
    idx = list(rrs_sample(3, 10, 0))
    assert set(idx) == {0, 1, 2}
    assert idx == sorted(idx)
    assert len(idx) == 10


@given(st.integers(1, 300), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_rrs_one_index_per_chunk(n, t, seed):
    idx = rrs_sample(n, t, seed)
    assert len(idx) == t
    if n >= t:
        bounds = (np.arange(t + 1) * n) // t
        assert np.all((idx >= bounds[:-1]) & (idx < bounds[1:]))
        assert np.all(np.diff(idx) > 0)
    else:
        assert np.all(np.diff(idx) >= 0)
        assert set(idx.tolist()) == set(range(n))


def test_rrs_rejects_empty_sequence():
    with pytest.raises(ValueError):
        rrs_sample(0, 5, 0)


def test_record_rng_depends_only_on_key():
    a = record_rng(3, "seq1").integers(1 << 30, size=4)
    record_rng(3, "other").integers(1 << 30, size=4)
    np.testing.assert_array_equal(a, record_rng(3, "seq1").integers(1 << 30, size=4))


def test_sample_frames_renumbers_and_keeps_gt():
    cfg = SynthConfig(gallery_size=5, n_sequences=1, frames_per_sequence=8, feature_dim=4, occlusion_rate=0.0)
    _, protos = generate_gallery(cfg)
    rec = generate_dataset(cfg, protos)[0]
    frames, gt = sample_frames(rec, [1, 3, 3, 6])
    assert [d.frame_index for f in frames for d in f] == sorted(d.frame_index for f in frames for d in f)
    assert gt.frame_indices == [0, 1, 2, 3]
    np.testing.assert_array_equal(gt.detections[1].conv_feature, gt.detections[2].conv_feature)


# -- ranking -------------------------------------------------------------


@pytest.mark.parametrize("method", METHODS)
def test_rank_gallery_matches_brute_force(method):
    rng = np.random.default_rng(7)
    model = random_model()
    gallery = random_gallery(rng, 12)
    params = model.params()
    for _ in range(5):
        tracklet = random_tracklet(rng, int(rng.integers(1, 6)))
        got = rank_gallery(tracklet, gallery, model, method, "q")
        scores = oracles.naive_scores(
            params,
            list(tracklet.features()),
            [d.confidence for d in tracklet.detections],
            [g.conv_feature for g in gallery],
            method,
        )
        assert got.item_ids == oracles.naive_ranking([g.item_id for g in gallery], scores)
        np.testing.assert_allclose([s for _, s in got.entries], sorted(scores, reverse=True), atol=1e-12)


@pytest.mark.parametrize("method", METHODS)
def test_gallery_of_one(method):
    rng = np.random.default_rng(0)
    gallery = random_gallery(rng, 1)
    r = rank_gallery(random_tracklet(rng, 3), gallery, random_model(), method)
    assert r.rank_of("g000") == 1


def test_single_frame_methods_agree_at_copy_init():
    rng = np.random.default_rng(2)
    sf = SingleFrameHead.init(HeadDims(8, 6, 3), 0)
    model = Model(sf, init_multi_from_single(sf, nlb_dim=3))
    gallery = random_gallery(rng, 9)
    t = random_tracklet(rng, 1)
    index = GalleryIndex(gallery, model)
    from vid2shop.evaluation import score_gallery

    base = score_gallery(t, index, model, "seam")
    for m in ("avg_distance", "max_matching", "max_confidence", "avg_descriptor"):
        np.testing.assert_allclose(score_gallery(t, index, model, m), base, atol=1e-12)


def test_mean_equals_seam_on_identical_frames():
    rng = np.random.default_rng(3)
    model = random_model()
    gallery = random_gallery(rng, 10)
    f = rng.standard_normal(8)
    t = Tracklet(0, tuple(make_det(i, 0, f) for i in range(4)))
    a = rank_gallery(t, gallery, model, "seam")
    b = rank_gallery(t, gallery, model, "seam_no_nlb_no_g")
    assert a.item_ids == b.item_ids
    np.testing.assert_allclose([s for _, s in a.entries], [s for _, s in b.entries], atol=1e-12)


def test_empty_tracklet_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        rank_gallery(None, random_gallery(rng, 2), random_model(), "seam")


def test_unknown_method():
    with pytest.raises(ValueError):
        EvalConfig(method="best")


@given(st.lists(st.floats(0, 1), min_size=2, max_size=20), st.integers(0, 19), st.floats(0, 1))
def test_raising_correct_score_never_hurts_rank(scores, pick, bump):
    pick %= len(scores)
    ids = [f"i{k:02d}" for k in range(len(scores))]
    before = Ranking.from_scores("q", ids, scores).rank_of(ids[pick])
    raised = list(scores)
    raised[pick] += bump
    assert Ranking.from_scores("q", ids, raised).rank_of(ids[pick]) <= before


# -- metrics -------------------------------------------------------------


def _ranking_with_target_at(rank, n=20):
    ids = [f"x{i:02d}" for i in range(n)]
    scores = [float(n - i) for i in range(n)]
    return Ranking.from_scores("q", ids, scores), ids[rank - 1]


def test_topk_hand_count():
    rankings, gt = [], {}
    for qi, rank in enumerate((1, 4, 12)):
        r, target = _ranking_with_target_at(rank)
        r = Ranking(f"q{qi}", r.entries)
        rankings.append(r)
        gt[r.query_id] = target
    assert topk_accuracy(rankings, gt, [1, 5, 10]) == pytest.approx([1 / 3, 2 / 3, 2 / 3])
    assert topk_accuracy(rankings, gt, [20]) == [1.0]


def _queries(ranks, classes=None):
    classes = classes or [CLOTHING_CLASSES[0]] * len(ranks)
    return [QueryResult(f"q{i}", "t", c, r) for i, (r, c) in enumerate(zip(ranks, classes))]


@given(st.lists(st.one_of(st.none(), st.integers(1, 50)), min_size=1, max_size=40))
def test_topk_non_decreasing_in_k(ranks):
    res = bootstrap_eval(_queries(ranks), [1, 5, 10, 20, 50], pool_size=len(ranks), repeats=1)
    means = [r.mean for r in res]
    assert means == sorted(means)


def test_bootstrap_full_pool_equals_plain_accuracy():
    ranks = [1, 4, 12, None, 2]
    res = bootstrap_eval(_queries(ranks), [1, 5, 10], pool_size=5, repeats=1)
    assert [r.mean for r in res] == [1 / 5, 3 / 5, 3 / 5]
    assert all(r.std == 0.0 for r in res)


def test_bootstrap_deterministic_and_std_non_negative():
    ranks = list(np.random.default_rng(0).integers(1, 30, size=100))
    a = bootstrap_eval(_queries(ranks), [1, 5], pool_size=40, repeats=20, seed=3)
    b = bootstrap_eval(_queries(ranks), [1, 5], pool_size=40, repeats=20, seed=3)
    assert a == b
    assert all(r.std >= 0 for r in a)


def test_per_class_hand_count():
    c0, c1, c2 = CLOTHING_CLASSES[:3]
    gallery = [GalleryItem(f"g{i}", c, np.zeros(2)) for i, c in enumerate((c0, c1, c2))]
    queries = _queries([1, 3, 1, 2], [c0, c0, c1, c1])
    rows = per_class_report(queries, gallery, ks=(1, 5), pool_size=4, repeats=1)
    table = {(r.class_label, r.k): (r.mean, r.std, r.n_queries) for r in rows}
    assert table[(c0, 1)] == (0.5, 0.0, 2)
    assert table[(c0, 5)] == (1.0, 0.0, 2)
    assert table[(c1, 1)] == (0.5, 0.0, 2)
    # no queries for c2: row omitted
    assert all(r.class_label != c2 for r in rows)


def test_per_class_all_correct():
    c0 = CLOTHING_CLASSES[0]
    rows = per_class_report(_queries([1, 1, 1]), [GalleryItem("g", c0, np.zeros(2))], ks=(1,), pool_size=3, repeats=5)
    assert rows[0].mean == 1.0


# -- pipeline ------------------------------------------------------------


def _tiny_benchmark():
    cfg = SynthConfig(gallery_size=20, n_sequences=12, frames_per_sequence=12, feature_dim=8, seed=5)
    gallery, protos = generate_gallery(cfg)
    return generate_dataset(cfg, protos), gallery


def test_parallel_evaluation_matches_serial():
    records, gallery = _tiny_benchmark()
    model = random_model()
    cfg = EvalConfig(method="seam")
    serial = evaluate_records(records, gallery, model, cfg, jobs=1, keep_rankings=True)
    parallel = evaluate_records(records, gallery, model, cfg, jobs=4, keep_rankings=True)
    assert [q.query_id for q in serial] == [q.query_id for q in parallel]
    assert [q.ranking for q in serial] == [q.ranking for q in parallel]


def test_class_filter_restricts_gallery():
    records, gallery = _tiny_benchmark()
    model = random_model()
    out = evaluate_records(records, gallery, model, EvalConfig(class_filter=True), keep_rankings=True)
    class_of = {g.item_id: g.class_label for g in gallery}
    for q in out:
        if q.ranking is not None:
            assert {class_of[i] for i in q.ranking.item_ids} == {q.class_label}
