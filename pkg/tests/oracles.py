"""Brute-force reference computations used only by the tests.

Nothing here imports the package's algorithms; each routine recomputes its
quantity the slow, obvious way.
"""

import itertools
import math
from collections import Counter
from fractions import Fraction

import numpy as np


def raster_iou(poly_a, poly_b, lo, hi, res=1024):
    """IoU of two convex polygons by counting pixel centres on a res x res grid."""
    t = lo + (np.arange(res) + 0.5) * (hi - lo) / res
    X, Y = np.meshgrid(t, t)

    def inside(poly):
        poly = np.asarray(poly, float)
        signed = 0.5 * np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1])
        if signed < 0:
            poly = poly[::-1]
        m = np.ones_like(X, dtype=bool)
        for i in range(len(poly)):
            a, b = poly[i], poly[(i + 1) % len(poly)]
            m &= (b[0] - a[0]) * (Y - a[1]) - (b[1] - a[1]) * (X - a[0]) >= 0
        return m

    A, B = inside(poly_a), inside(poly_b)
    union = np.count_nonzero(A | B)
    return np.count_nonzero(A & B) / union if union else float("nan")


def rect_corners(cx, cy, w, h, theta):
    c, s = math.cos(theta), math.sin(theta)
    pts = []
    for su, sv in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
        pts.append((cx + su * c * w / 2 - sv * s * h / 2, cy + su * s * w / 2 + sv * c * h / 2))
    return np.array(pts)


def sweep_enclosing_area(bitmap, n_angles=180, step_deg=1.0):
    """Smallest enclosing-rectangle area over a fixed grid of angles.

    Returns (area, angle_rad, extent_u, extent_v) of the best sampled angle.
    """
    ys, xs = np.nonzero(bitmap)
    pts = np.concatenate([
        np.stack([xs + dx, ys + dy], 1) for dx in (0, 1) for dy in (0, 1)
    ]).astype(float)
    best = None
    for k in range(n_angles):
        a = math.radians(k * step_deg)
        u = np.array([math.cos(a), math.sin(a)])
        v = np.array([-u[1], u[0]])
        pu, pv = pts @ u, pts @ v
        du, dv = pu.max() - pu.min(), pv.max() - pv.min()
        if best is None or du * dv < best[0]:
            best = (du * dv, a, du, dv)
    return best


def brute_assignment_cost(cost):
    """Minimum total cost over every injective row->column map (rows <= cols)."""
    cost = np.asarray(cost)
    n, m = cost.shape
    if n > m:
        return brute_assignment_cost(cost.T)
    best = None
    for cols in itertools.permutations(range(m), n):
        total = sum(cost[i, cols[i]] for i in range(n))
        if best is None or total < best:
            best = total
    return best


def ari_pairs(a, b):
    """Adjusted Rand index by explicit pair counting (Hubert-Arabie)."""
    n = len(a)
    both = same_a = same_b = 0
    for i in range(n):
        for j in range(i + 1, n):
            sa, sb = a[i] == a[j], b[i] == b[j]
            same_a += sa
            same_b += sb
            both += sa and sb
    total = n * (n - 1) // 2
    expected = Fraction(same_a * same_b, total)
    max_index = Fraction(same_a + same_b, 2)
    if max_index == expected:
        return 1.0
    return float((both - expected) / (max_index - expected))


def _entropy(labels):
    n = len(labels)
    return -sum((c / n) * math.log(c / n) for c in Counter(labels).values())


def _mutual_info(a, b):
    n = len(a)
    joint = Counter(zip(a, b))
    ca, cb = Counter(a), Counter(b)
    return sum((c / n) * math.log(c * n / (ca[x] * cb[y])) for (x, y), c in joint.items())


def _expected_mutual_info(a, b):
    """E[MI] under the hypergeometric permutation model, summed term by term."""
    n = len(a)
    total = 0.0
    for ai in Counter(a).values():
        for bj in Counter(b).values():
            for nij in range(max(1, ai + bj - n), min(ai, bj) + 1):
                p = (math.comb(bj, nij) * math.comb(n - bj, ai - nij)) / math.comb(n, ai)
                total += (nij / n) * math.log(n * nij / (ai * bj)) * p
    return total


def nmi_direct(a, b):
    ha, hb = _entropy(a), _entropy(b)
    if ha == 0 and hb == 0:
        return 1.0
    denom = (ha + hb) / 2
    return _mutual_info(a, b) / denom


def ami_direct(a, b):
    if len(set(a)) == len(set(b)) == len(set(zip(a, b))):
        return 1.0  # identical up to relabelling
    mi = _mutual_info(a, b)
    emi = _expected_mutual_info(a, b)
    denom = (_entropy(a) + _entropy(b)) / 2 - emi
    return (mi - emi) / denom


def ha_brute(true, pred):
    """Best accuracy over every injective cluster->label map."""
    clusters = sorted(set(pred))
    labels = sorted(set(true))
    n = len(true)
    best = 0
    pad = labels + [None] * max(0, len(clusters) - len(labels))
    for perm in itertools.permutations(pad, len(clusters)):
        mapping = dict(zip(clusters, perm))
        hits = sum(1 for t, p in zip(true, pred) if mapping[p] == t)
        best = max(best, hits)
    return best / n


def _row_spans(poly, ys):
    """x-extent of a convex polygon along each horizontal line y in ``ys``."""
    poly = np.asarray(poly, float)
    left = np.full(len(ys), np.inf)
    right = np.full(len(ys), -np.inf)
    for i in range(len(poly)):
        (x0, y0), (x1, y1) = poly[i], poly[(i + 1) % len(poly)]
        if y0 == y1:
            continue
        s = (ys - y0) / (y1 - y0)
        ok = (s >= 0) & (s <= 1)
        x = x0 + s * (x1 - x0)
        left = np.where(ok, np.minimum(left, x), left)
        right = np.where(ok, np.maximum(right, x), right)
    return left, right


def scanline_raster_iou(poly_a, poly_b, lo, hi, res=1024):
    """Same pixel-centre count as :func:`raster_iou`, one row at a time.

    Each row of a convex polygon is a single interval, so the number of
    pixel centres it covers follows from the interval ends; this makes a
    1024 x 1024 raster cheap enough to run thousands of times.
    """
    d = (hi - lo) / res
    ys = lo + (np.arange(res) + 0.5) * d

    def count(left, right):
        first = np.ceil((left - lo) / d - 0.5)
        last = np.floor((right - lo) / d - 0.5)
        first, last = np.clip(first, 0, res - 1), np.clip(last, 0, res - 1)
        n = np.where(right >= left, last - first + 1, 0)
        return np.maximum(n, 0).sum()

    la, ra = _row_spans(poly_a, ys)
    lb, rb = _row_spans(poly_b, ys)
    inter = count(np.maximum(la, lb), np.minimum(ra, rb))
    union = count(la, ra) + count(lb, rb) - inter
    return inter / union if union else float("nan")


def upsampled_mask_iou(a, b, factor=16):
    """IoU of two bitmaps after drawing every pixel as a factor x factor block."""
    A = np.kron(np.asarray(a, np.uint8), np.ones((factor, factor), np.uint8)).astype(bool)
    B = np.kron(np.asarray(b, np.uint8), np.ones((factor, factor), np.uint8)).astype(bool)
    union = np.count_nonzero(A | B)
    return np.count_nonzero(A & B) / union if union else float("nan")


def pair_direction_min_area(bitmap):
    """Smallest enclosing rectangle over every direction joining two boundary corners.

    The optimal rectangle has a side along some hull edge, and every hull
    edge joins two boundary pixel corners, so trying all such pairs is an
    exhaustive (if slow) search that needs no hull code.
    """
    bm = np.asarray(bitmap, bool)
    h, w = bm.shape
    pad = np.zeros((h + 2, w + 2), int)
    pad[1:-1, 1:-1] = bm
    # corner (x, y) touches pixels (x-1..x, y-1..y)
    touch = pad[:-1, :-1] + pad[:-1, 1:] + pad[1:, :-1] + pad[1:, 1:]
    ys, xs = np.nonzero((touch > 0) & (touch < 4))
    pts = np.stack([xs, ys], 1).astype(float)
    i, j = np.triu_indices(len(pts), 1)
    dirs = pts[j] - pts[i]
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    best = np.inf
    for chunk in np.array_split(np.arange(len(dirs)), max(1, len(dirs) // 2000)):
        u = dirs[chunk]
        pu = pts @ u.T
        pv = pts @ np.stack([-u[:, 1], u[:, 0]], 1).T
        area = np.ptp(pu, axis=0) * np.ptp(pv, axis=0)
        best = min(best, float(area.min()))
    return best
