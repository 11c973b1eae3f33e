import numpy as np
import pytest

from herdreid.geometry import Aabb, encode
from herdreid.ingest import Annotation
from herdreid.loceval import (
    GeometryModeError,
    LocThresholds,
    associate_tracks,
    evaluate,
    label_detections,
    match_clip,
    match_frame,
    per_frame_series,
    per_individual_iou,
)
from herdreid.refine import Detection

from oracles import brute_assignment_cost


def gt(fid, ident, x, y, w, h, track=None):
    bm = np.zeros((60, 400), bool)
    bm[y:y + h, x:x + w] = True
    m = encode(bm)
    return Annotation(fid, Aabb(x, y, w, h), m, ident, track)


def dt(fid, x, y, w, h, score=0.9, track=None):
    bm = np.zeros((60, 400), bool)
    bm[y:y + h, x:x + w] = True
    return Detection(fid, Aabb(x, y, w, h), score, encode(bm), track)


def hand_clip():
    anns = {f: [gt(f, "A", 0, 0, 10, 10, "tA"), gt(f, "B", 100, 0, 10, 10, "tB")] for f in ("f1", "f2", "f3")}
    dets = {
        "f1": [dt("f1", 0, 0, 10, 10, track="1"), dt("f1", 100, 0, 10, 8, track="2")],
        "f2": [dt("f2", 100, 0, 10, 3, track="2"), dt("f2", 0, 0, 10, 10, track="1")],
        "f3": [dt("f3", 0, 0, 10, 10, track="1"), dt("f3", 300, 30, 10, 10, track="9")],
    }
    return anns, dets


def test_match_single_identical():
    a = gt("f", "A", 5, 5, 10, 10)
    m = match_frame([a], [dt("f", 5, 5, 10, 10)], "mask")
    assert m.pairs == [("A", 0, 1.0)]
    assert m.unmatched_gt == [] and m.unmatched_det == []


def test_match_no_detections():
    m = match_frame([gt("f", "A", 0, 0, 5, 5), gt("f", "B", 10, 0, 5, 5)], [], "aabb")
    assert m.pairs == [] and m.unmatched_gt == ["A", "B"]


def test_match_prefers_total_iou():
    ious = np.array([[0.8, 0.4], [0.5, 0.7]])
    g = [gt("f", "A", 0, 0, 1, 1), gt("f", "B", 0, 0, 1, 1)]
    d = [dt("f", 0, 0, 1, 1), dt("f", 0, 0, 1, 1)]
    m = match_frame(g, d, ious=ious)
    assert [(i, j) for i, j, _ in m.pairs] == [("A", 0), ("B", 1)]
    assert sum(v for *_, v in m.pairs) == pytest.approx(1.5)


def test_match_optimal_against_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(300):
        n, k = rng.integers(1, 8, size=2)
        ious = rng.random((n, k)) * (rng.random((n, k)) < 0.6)
        g = [gt("f", str(i), 0, 0, 1, 1) for i in range(n)]
        d = [dt("f", 0, 0, 1, 1) for _ in range(k)]
        m = match_frame(g, d, ious=ious)
        best = -brute_assignment_cost(-ious)
        assert sum(v for *_, v in m.pairs) == pytest.approx(best, abs=1e-12)
        assert all(v > 0 for *_, v in m.pairs)
        assert len({j for _, j, _ in m.pairs}) == len(m.pairs)


def test_mask_mode_requires_masks():
    d = Detection("f", Aabb(0, 0, 3, 3), 0.5)
    with pytest.raises(GeometryModeError):
        match_frame([gt("f", "A", 0, 0, 3, 3)], [d], "mask")
    # box geometries still work without masks
    assert match_frame([gt("f", "A", 0, 0, 3, 3)], [d], "obb").pairs[0][2] == pytest.approx(1.0)


def test_per_individual_examples():
    anns, dets = hand_clip()
    matches = match_clip(anns, dets, "aabb")
    per = per_individual_iou(matches)
    assert per["A"] == pytest.approx(1.0)
    assert per["B"] == pytest.approx((0.8 + 0.3 + 0.0) / 3)
    m = [match_frame([gt(f, "C", 0, 0, 4, 4)], [], "aabb", f) for f in "xyz"]
    assert per_individual_iou(m) == {"C": 0.0}


def test_per_individual_three_frames_missing_one():
    g = [gt(f, "A", 0, 0, 10, 10) for f in "abc"]
    ms = [match_frame([g[0]], [dt("a", 0, 0, 10, 9)], "aabb", "a"),
          match_frame([g[1]], [dt("b", 0, 0, 10, 6)], "aabb", "b"),
          match_frame([g[2]], [], "aabb", "c")]
    assert per_individual_iou(ms)["A"] == pytest.approx(0.5)


def test_hand_clip_metrics():
    anns, dets = hand_clip()
    for geometry in ("aabb", "obb", "mask"):
        rep = evaluate(anns, dets, geometry)
        assert rep.mean_iou == pytest.approx(4.1 / 6, abs=1e-12)
        assert rep.usage_rate == pytest.approx(4 / 6, abs=1e-12)
        assert rep.matching_rate == pytest.approx(4 / 6, abs=1e-12)
        assert rep.tp_accuracy == pytest.approx(0.5, abs=1e-12)
    rep = evaluate(anns, dets, "aabb", LocThresholds(tp_mode="mean_iou", matching_direction="det"))
    assert rep.tp_accuracy == pytest.approx(1.0)
    assert rep.matching_rate == pytest.approx(4 / 6)
    series = [(s.frame_id, s.mean_iou, s.usage_rate) for s in rep.per_frame]
    assert series == [("f1", pytest.approx(0.9), 1.0), ("f2", pytest.approx(0.65), 0.5), ("f3", 0.5, 0.5)]


def test_gt_as_detections_is_perfect():
    anns, _ = hand_clip()
    dets = {f: [Detection(f, a.box, 1.0, a.mask, a.track_id) for a in v] for f, v in anns.items()}
    for geometry in ("aabb", "obb", "mask"):
        rep = evaluate(anns, dets, geometry, use_tracks=True)
        assert (rep.mean_iou, rep.tp_accuracy, rep.usage_rate, rep.matching_rate) == (1.0, 1.0, 1.0, 1.0)


def test_zero_detections_usage_undefined():
    anns, _ = hand_clip()
    rep = evaluate(anns, {}, "aabb")
    assert rep.usage_rate is None
    assert rep.matching_rate == 0.0 and rep.mean_iou == 0.0


def test_metrics_invariant_to_order():
    anns, dets = hand_clip()
    base = evaluate(anns, dets, "mask").summary()
    rev_anns = dict(reversed(list(anns.items())))
    shuffled = {f: list(reversed(v)) for f, v in dets.items()}
    other = evaluate(rev_anns, shuffled, "mask").summary()
    for k, v in base.items():
        assert other[k] == pytest.approx(v)


def test_track_association_majority():
    anns, dets = hand_clip()
    matches = match_clip(anns, dets, "aabb")
    assoc = associate_tracks(matches, dets)
    assert assoc == {"A": "1", "B": "2"}
    # a frame where A is matched through a foreign track contributes 0
    dets["f3"][0] = dt("f3", 0, 0, 10, 10, track="other")
    matches = match_clip(anns, dets, "aabb")
    per = per_individual_iou(matches, associate_tracks(matches, dets), dets)
    assert per["A"] == pytest.approx(2 / 3)


def test_per_frame_series_patterns():
    g = gt("f", "A", 50, 10, 20, 20)
    flat = [match_frame([g], [dt("f", 50, 10, 20, 20)], "mask", str(i)) for i in range(4)]
    assert [s.mean_iou for s in per_frame_series(flat)] == [1.0] * 4
    alt = [match_frame([g], [dt("f", 50, 10, 20, 20)] if i % 2 == 0 else [], "mask", str(i)) for i in range(4)]
    assert [s.mean_iou for s in per_frame_series(alt)] == [1.0, 0.0, 1.0, 0.0]
    # jitter growing by one pixel per frame
    ramp = [match_frame([g], [dt("f", 50 + k, 10 + k, 20, 20)], "mask", str(k)) for k in range(12)]
    vals = [s.mean_iou for s in per_frame_series(ramp)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert vals[0] == 1.0 and vals[-1] < vals[0]


def test_label_detections_unique_per_frame():
    anns, dets = hand_clip()
    # split fragment of A in f1 with A's track
    dets["f1"].append(dt("f1", 0, 0, 3, 3, track="1"))
    labels = label_detections(anns, dets, "mask")
    assert labels["f1"] == ["A", "B", None]
    assert labels["f3"] == ["A", None]
    for fid, labs in labels.items():
        named = [x for x in labs if x is not None]
        assert len(named) == len(set(named))
