import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from herdreid.geometry import (
    Aabb,
    EmptyMaskError,
    EmptyPairError,
    Mask,
    MaskShapeError,
    Obb,
    aabb_iou,
    clip_convex,
    decode,
    encode,
    mask_iou,
    mask_iou_matrix,
    mask_to_aabb,
    min_area_obb,
    obb_iou,
    polygon_area,
)

from oracles import raster_iou, sweep_enclosing_area


def test_aabb_iou_identity_and_disjoint():
    a = Aabb(3, 4, 10, 5)
    assert aabb_iou(a, a) == 1.0
    assert aabb_iou(a, Aabb(20, 20, 3, 3)) == 0.0
    # touching edge counts as zero overlap
    assert aabb_iou(Aabb(0, 0, 2, 2), Aabb(2, 0, 2, 2)) == 0.0


def test_aabb_iou_pixel_count_oracle():
    grid = np.zeros((2, 4, 4), bool)
    grid[0, 0:2, 0:2] = True
    grid[1, 1:3, 1:3] = True
    expected = np.count_nonzero(grid[0] & grid[1]) / np.count_nonzero(grid[0] | grid[1])
    assert expected == pytest.approx(1 / 7)
    assert aabb_iou(Aabb(0, 0, 2, 2), Aabb(1, 1, 2, 2)) == pytest.approx(expected, abs=1e-15)


def test_aabb_rejects_nonpositive_sides():
    with pytest.raises(ValueError):
        Aabb(0, 0, 0, 3)


def test_obb_identity_and_disjoint():
    a = Obb(5, 5, 4, 2, 0.3)
    assert obb_iou(a, a) == 1.0
    assert obb_iou(a, Obb(50, 50, 4, 2, -0.2)) == 0.0


def test_obb_rotated_square():
    a = Obb(0, 0, 1, 1, 0.0)
    b = Obb(0, 0, 1, 1, math.pi / 4)
    # intersection is a regular octagon of area 2(sqrt2 - 1)
    inter = 2 * (math.sqrt(2) - 1)
    analytic = inter / (2 - inter)
    assert obb_iou(a, b) == pytest.approx(analytic, abs=1e-12)
    assert analytic == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert raster_iou(a.corners(), b.corners(), -1, 1, res=2048) == pytest.approx(analytic, abs=1e-3)


def test_obb_canonical_form():
    a = Obb(0, 0, 2, 5, 0.1)
    assert a.w == 5 and a.h == 2
    assert a.theta == pytest.approx(0.1 + math.pi / 2 - math.pi)
    assert -math.pi / 2 <= a.theta < math.pi / 2
    # equivalent representations share one canonical angle
    b1, b2 = Obb(1, 1, 5, 2, 0.1 + math.pi), Obb(1, 1, 5, 2, 0.1)
    assert b1.theta == pytest.approx(b2.theta)
    sq = Obb(0, 0, 3, 3, math.pi / 2 + 0.2)
    assert sq.theta == pytest.approx(0.2)


def test_polygon_clip_simple_square():
    a = np.array([[0, 0], [2, 0], [2, 2], [0, 2]], float)
    b = a + 1
    poly = clip_convex(a, b)
    assert abs(polygon_area(poly)) == pytest.approx(1.0)
    assert len(clip_convex(a, a + 5)) == 0


def _random_obb(rng, lo=-1.0, hi=1.0):
    w, h = rng.uniform(0.3, 1.2, size=2)
    cx, cy = rng.uniform(lo + 0.6, hi - 0.6, size=2)
    return Obb(cx, cy, w, h, rng.uniform(-math.pi, math.pi))


def test_obb_iou_raster_oracle_sample():
    rng = np.random.default_rng(7)
    for _ in range(60):
        a, b = _random_obb(rng), _random_obb(rng)
        lo = min(a.corners().min(), b.corners().min()) - 0.01
        hi = max(a.corners().max(), b.corners().max()) + 0.01
        assert obb_iou(a, b) == pytest.approx(raster_iou(a.corners(), b.corners(), lo, hi), abs=1e-3)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 4), st.floats(0.1, 4), st.floats(-4, 4),
    st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 4), st.floats(0.1, 4), st.floats(-4, 4),
)
def test_obb_iou_symmetric_bounded(ax, ay, aw, ah, at, bx, by, bw, bh, bt):
    a, b = Obb(ax, ay, aw, ah, at), Obb(bx, by, bw, bh, bt)
    v = obb_iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(obb_iou(b, a), abs=1e-9)


# ---------------------------------------------------------------- masks


def test_rle_examples():
    assert encode(np.zeros((2, 2), bool)).runs == (4,)
    assert encode(np.ones((2, 2), bool)).runs == (0, 4)
    checker = np.array([[0, 1], [1, 0]], bool)
    m = encode(checker)
    assert m.runs == (1, 2, 1)
    assert np.array_equal(decode(m), checker)
    # non-canonical runs with zero-length interior runs collapse
    assert Mask(2, 2, (1, 1, 0, 1, 1)).runs == (1, 2, 1)
    assert Mask(2, 2, (0, 4, 0)).runs == (0, 4)


def test_rle_length_mismatch():
    with pytest.raises(MaskShapeError):
        Mask(2, 2, (1, 2))
    with pytest.raises(MaskShapeError):
        Mask(2, 2, (5, -1))


def test_rle_roundtrip_random():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        h, w = rng.integers(1, 12, size=2)
        bm = rng.random((h, w)) < rng.random()
        m = encode(bm)
        assert np.array_equal(decode(m), bm)
        assert encode(decode(m)) == m
        assert sum(m.runs) == h * w


def test_mask_iou_examples():
    left = np.zeros((10, 10), bool)
    left[:, :6] = True
    right = np.zeros((10, 10), bool)
    right[:, 4:] = True
    a, b = encode(left), encode(right)
    assert mask_iou(a, b) == pytest.approx(0.2)
    assert mask_iou(a, a) == 1.0
    far = np.zeros((10, 10), bool)
    far[0, 9] = True
    assert mask_iou(encode(left), encode(far)) == 0.0


def test_mask_iou_errors():
    empty = encode(np.zeros((3, 3), bool))
    with pytest.raises(EmptyPairError):
        mask_iou(empty, empty)
    with pytest.raises(MaskShapeError):
        mask_iou(empty, encode(np.zeros((3, 4), bool)))
    assert mask_iou(empty, encode(np.ones((3, 3), bool))) == 0.0


def test_mask_iou_matrix_matches_pairwise():
    rng = np.random.default_rng(3)
    ms = [encode(rng.random((8, 9)) < 0.4) for _ in range(5)]
    M = mask_iou_matrix(ms[:3], ms[2:])
    for i in range(3):
        for j in range(3):
            assert M[i, j] == pytest.approx(mask_iou(ms[i], ms[2 + j]))


def test_mask_to_aabb():
    assert mask_to_aabb(encode(np.ones((5, 7), bool))) == Aabb(0, 0, 7, 5)
    bm = np.zeros((10, 10), bool)
    bm[4, 3] = True
    assert mask_to_aabb(encode(bm)) == Aabb(3, 4, 1, 1)
    bm[8, 9] = True
    bm[1, 5] = True
    ys, xs = np.nonzero(bm)
    expected = Aabb(xs.min(), ys.min(), xs.max() - xs.min() + 1, ys.max() - ys.min() + 1)
    assert mask_to_aabb(encode(bm)) == expected
    with pytest.raises(EmptyMaskError):
        mask_to_aabb(encode(np.zeros((2, 2), bool)))


def test_min_area_obb_axis_aligned_block():
    bm = np.zeros((20, 30), bool)
    bm[5:9, 3:15] = True
    o = min_area_obb(encode(bm))
    assert (o.w, o.h) == pytest.approx((12, 4))
    assert o.theta == pytest.approx(0.0, abs=1e-12)
    assert (o.cx, o.cy) == pytest.approx((9, 7))


def test_min_area_obb_single_pixel():
    bm = np.zeros((5, 5), bool)
    bm[2, 3] = True
    o = min_area_obb(encode(bm))
    assert (o.cx, o.cy, o.w, o.h) == pytest.approx((3.5, 2.5, 1, 1))


def test_min_area_obb_diagonal_strip_matches_fine_sweep():
    n = 64
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    # 45 degree strip, 3 px wide, 20 px long, centred at (32, 32)
    u = ((xx - 32) + (yy - 32)) / math.sqrt(2)
    v = (-(xx - 32) + (yy - 32)) / math.sqrt(2)
    bm = (np.abs(u) <= 10) & (np.abs(v) <= 1.5)
    o = min_area_obb(encode(bm))
    area, angle, du, dv = sweep_enclosing_area(bm, n_angles=1800, step_deg=0.1)
    assert o.area <= area * (1 + 1e-6)
    assert o.theta == pytest.approx(math.pi / 4, abs=math.radians(6))
    assert o.w == pytest.approx(20, abs=2.5)
    assert o.h == pytest.approx(3, abs=2.5)
    assert max(du, dv) == pytest.approx(o.w, rel=0.05)


def test_min_area_obb_contains_all_pixels_and_beats_sweep():
    rng = np.random.default_rng(11)
    for _ in range(25):
        bm = rng.random((15, 18)) < 0.15
        if not bm.any():
            continue
        o = min_area_obb(encode(bm))
        sweep = sweep_enclosing_area(bm)[0]
        assert o.area <= sweep * (1 + 1e-6)
        assert o.area >= np.count_nonzero(bm) - 1e-9
        ys, xs = np.nonzero(bm)
        c, s = math.cos(o.theta), math.sin(o.theta)
        for dx in (0, 1):
            for dy in (0, 1):
                px, py = xs + dx - o.cx, ys + dy - o.cy
                assert np.all(np.abs(px * c + py * s) <= o.w / 2 + 1e-9)
                assert np.all(np.abs(-px * s + py * c) <= o.h / 2 + 1e-9)


def test_min_area_obb_empty():
    with pytest.raises(EmptyMaskError):
        min_area_obb(encode(np.zeros((3, 3), bool)))
