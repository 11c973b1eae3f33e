"""Geometry kernel: run-length masks, axis-aligned and oriented boxes, IoU.

Pixel model: pixel ``(x, y)`` (column, row) covers the unit square
``[x, x+1) x [y, y+1)``. Image axes are used throughout (x right, y down),
so an OBB angle is measured from the +x axis towards +y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "Aabb",
    "Obb",
    "Mask",
    "EmptyMaskError",
    "EmptyPairError",
    "MaskShapeError",
    "aabb_iou",
    "obb_iou",
    "mask_iou",
    "mask_iou_matrix",
    "min_area_obb",
    "mask_to_aabb",
    "encode",
    "decode",
    "convex_hull",
    "clip_convex",
    "polygon_area",
]


class EmptyMaskError(ValueError):
    """Raised when an operation needs at least one foreground pixel."""


class EmptyPairError(ValueError):
    """Both masks are empty, so their IoU is undefined."""


class MaskShapeError(ValueError):
    """Masks (or runs) disagree with the declared grid dimensions."""


@dataclass(frozen=True)
class Aabb:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sides must be positive, got w={self.w} h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_list(self) -> list:
        return [self.x, self.y, self.w, self.h]

    def corners(self) -> np.ndarray:
        x0, y0, x1, y1 = self.x, self.y, self.x + self.w, self.y + self.h
        return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)


def _canonical_obb(w: float, h: float, theta: float):
    if h > w:
        w, h = h, w
        theta += math.pi / 2
    if math.isclose(w, h, rel_tol=1e-12):
        # square: four equivalent angles, keep the one nearest zero
        theta = (theta + math.pi / 4) % (math.pi / 2) - math.pi / 4
    else:
        theta = (theta + math.pi / 2) % math.pi - math.pi / 2
    return w, h, theta


@dataclass(frozen=True)
class Obb:
    """Oriented box; normalised on construction so that ``w >= h``.

    ``theta`` lies in ``[-pi/2, pi/2)``; squares use ``[-pi/4, pi/4)``.
    """

    cx: float
    cy: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sides must be positive, got w={self.w} h={self.h}")
        w, h, theta = _canonical_obb(float(self.w), float(self.h), float(self.theta))
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def from_aabb(cls, box: Aabb) -> "Obb":
        return cls(box.x + box.w / 2, box.y + box.h / 2, box.w, box.h, 0.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> np.ndarray:
        """Corner polygon, counter-clockwise in a y-up frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        u = np.array([c, s]) * (self.w / 2)
        v = np.array([-s, c]) * (self.h / 2)
        ctr = np.array([self.cx, self.cy])
        return np.array([ctr - u - v, ctr + u - v, ctr + u + v, ctr - u + v])


@dataclass(frozen=True, eq=True)
class Mask:
    """Binary mask stored as row-major run lengths, background first.

    Runs are kept in canonical form: only the leading run may be zero, and
    adjacent runs always alternate value.
    """

    width: int
    height: int
    runs: tuple

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise MaskShapeError(f"invalid grid {self.width}x{self.height}")
        runs = [int(r) for r in self.runs]
        if any(r < 0 for r in runs):
            raise MaskShapeError("run lengths must be non-negative")
        if sum(runs) != self.width * self.height:
            raise MaskShapeError(
                f"runs sum to {sum(runs)}, expected {self.width * self.height}"
            )
        object.__setattr__(self, "runs", _canonical_runs(runs))

    @classmethod
    def from_array(cls, bitmap) -> "Mask":
        return encode(bitmap)

    def to_array(self) -> np.ndarray:
        return decode(self)

    @property
    def area(self) -> int:
        return int(sum(self.runs[1::2]))

    @property
    def is_empty(self) -> bool:
        return len(self.runs) < 2


def _canonical_runs(runs: Sequence[int]) -> tuple:
    merged: list = []  # [value, count]
    for i, r in enumerate(runs):
        if r == 0:
            continue
        value = i % 2
        if merged and merged[-1][0] == value:
            merged[-1][1] += r
        else:
            merged.append([value, r])
    out = [c for _, c in merged]
    if not merged or merged[0][0] == 1:
        out.insert(0, 0)
    return tuple(out)


def encode(bitmap) -> Mask:
    """Run-length encode an ``(height, width)`` boolean array."""
    arr = np.asarray(bitmap)
    if arr.ndim != 2:
        raise MaskShapeError(f"expected a 2-D bitmap, got shape {arr.shape}")
    h, w = arr.shape
    flat = arr.reshape(-1).astype(bool)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs.insert(0, 0)
    return Mask(w, h, tuple(runs))


def decode(mask: Mask) -> np.ndarray:
    values = np.arange(len(mask.runs)) % 2 == 1
    flat = np.repeat(values, mask.runs)
    return flat.reshape(mask.height, mask.width)


def aabb_iou(a: Aabb, b: Aabb) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def polygon_area(poly) -> float:
    """Signed shoelace area (positive for counter-clockwise in y-up axes)."""
    p = np.asarray(poly, dtype=float)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject, clipper) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` against convex ``clipper``.

    Both polygons may be given in either winding; the result is returned
    counter-clockwise (possibly empty).
    """
    subj = [tuple(p) for p in np.asarray(subject, dtype=float)]
    clip = np.asarray(clipper, dtype=float)
    if polygon_area(clip) < 0:
        clip = clip[::-1]
    if polygon_area(np.array(subj)) < 0:
        subj = subj[::-1]

    def side(a, b, p):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])

    n = len(clip)
    for i in range(n):
        if not subj:
            break
        a, b = clip[i], clip[(i + 1) % n]
        out = []
        prev = subj[-1]
        sp = side(a, b, prev)
        for cur in subj:
            sc = side(a, b, cur)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, sp = cur, sc
        subj = out
    return np.array(subj, dtype=float).reshape(-1, 2)


def obb_iou(a: Obb, b: Obb) -> float:
    if a == b:
        return 1.0
    # cheap reject on circumscribed circles
    ra = math.hypot(a.w, a.h) / 2
    rb = math.hypot(b.w, b.h) / 2
    if math.hypot(a.cx - b.cx, a.cy - b.cy) >= ra + rb:
        return 0.0
    inter = abs(polygon_area(clip_convex(a.corners(), b.corners())))
    if inter <= 0:
        return 0.0
    union = a.area + b.area - inter
    return min(1.0, max(0.0, inter / union))


def mask_iou(a: Mask, b: Mask) -> float:
    """Foreground IoU of two masks on the same grid.

    Raises :class:`EmptyPairError` when both masks are empty.
    """
    if (a.width, a.height) != (b.width, b.height):
        raise MaskShapeError(
            f"grid mismatch: {a.width}x{a.height} vs {b.width}x{b.height}"
        )
    if a == b:
        if a.is_empty:
            raise EmptyPairError("IoU of two empty masks is undefined")
        return 1.0
    x, y = decode(a), decode(b)
    union = np.count_nonzero(x | y)
    if union == 0:
        raise EmptyPairError("IoU of two empty masks is undefined")
    return np.count_nonzero(x & y) / union


def mask_iou_matrix(rows: Sequence[Mask], cols: Sequence[Mask]) -> np.ndarray:
    """Pairwise IoU matrix; pairs with an empty union are reported as NaN."""
    out = np.zeros((len(rows), len(cols)))
    if not rows or not cols:
        return out
    dims = {(m.width, m.height) for m in (*rows, *cols)}
    if len(dims) != 1:
        raise MaskShapeError(f"masks span several grids: {sorted(dims)}")
    R = np.stack([decode(m).reshape(-1) for m in rows]).astype(np.float64)
    C = np.stack([decode(m).reshape(-1) for m in cols]).astype(np.float64)
    inter = R @ C.T
    union = R.sum(1)[:, None] + C.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), np.nan)
    return out


def mask_to_aabb(m: Mask) -> Aabb:
    arr = decode(m)
    ys, xs = np.nonzero(arr)
    if xs.size == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    x0, y0 = int(xs.min()), int(ys.min())
    return Aabb(x0, y0, int(xs.max()) - x0 + 1, int(ys.max()) - y0 + 1)


def convex_hull(points) -> np.ndarray:
    """Andrew's monotone chain; returns the hull counter-clockwise (y-up)."""
    pts = sorted(set(map(tuple, np.asarray(points).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=float).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def _pixel_corner_points(arr: np.ndarray) -> np.ndarray:
    # Only the extreme pixels of each row can contribute hull vertices.
    rows = np.flatnonzero(arr.any(axis=1))
    left = arr[rows].argmax(axis=1)
    right = arr.shape[1] - 1 - arr[rows, ::-1].argmax(axis=1)
    pts = np.concatenate([
        np.stack([left, rows], 1),
        np.stack([left, rows + 1], 1),
        np.stack([right + 1, rows], 1),
        np.stack([right + 1, rows + 1], 1),
    ])
    return pts


def min_area_obb(m: Mask) -> Obb:
    """Minimum-area rectangle enclosing every foreground pixel square.

    Rotating calipers over the convex hull of pixel corners: the optimal
    rectangle has one side collinear with a hull edge.
    """
    arr = decode(m)
    if not arr.any():
        raise EmptyMaskError("mask has no foreground pixels")
    hull = convex_hull(_pixel_corner_points(arr))
    best = None
    n = len(hull)
    for i in range(n):
        e = hull[(i + 1) % n] - hull[i]
        length = math.hypot(e[0], e[1])
        if length == 0:
            continue
        u = e / length
        v = np.array([-u[1], u[0]])
        pu, pv = hull @ u, hull @ v
        du, dv = pu.max() - pu.min(), pv.max() - pv.min()
        area = du * dv
        if best is None or area < best[0] * (1 - 1e-12):
            ctr = u * (pu.max() + pu.min()) / 2 + v * (pv.max() + pv.min()) / 2
            best = (area, ctr, du, dv, math.atan2(u[1], u[0]))
    _, ctr, du, dv, theta = best
    return Obb(float(ctr[0]), float(ctr[1]), float(du), float(dv), theta)
