"""Heuristic clean-up of raw prompted-detector boxes.

The pipeline is: size filter relative to the frame, greedy non-maximum
suppression, then an optional score floor.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .geometry import Aabb, Mask, aabb_iou

__all__ = ["RefineConfig", "Detection", "area_ratio_filter", "nms", "refine"]

FILTER_MODES = ("area", "side", "aspect")
_EPS = 1e-12


@dataclass(frozen=True)
class RefineConfig:
    area_ratio_lo: float = 0.025
    area_ratio_hi: float = 0.075
    nms_iou_threshold: float = 0.5
    score_floor: float = 0.0
    # "area": box area / frame area; "side": both side ratios in range;
    # "aspect": short side / long side of the box itself
    filter_mode: str = "area"

    def __post_init__(self):
        if not (0 <= self.area_ratio_lo < self.area_ratio_hi <= 1):
            raise ValueError("need 0 <= area_ratio_lo < area_ratio_hi <= 1")
        if not (0 < self.nms_iou_threshold < 1):
            raise ValueError("nms_iou_threshold must lie in (0, 1)")
        if not (0 <= self.score_floor <= 1):
            raise ValueError("score_floor must lie in [0, 1]")
        if self.filter_mode not in FILTER_MODES:
            raise ValueError(f"filter_mode must be one of {FILTER_MODES}")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "RefineConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown refine options: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Detection:
    frame_id: str
    box: Aabb
    score: float = 1.0
    mask: Optional[Mask] = field(default=None, compare=True)
    track_id: Optional[str] = None

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")

    def with_(self, **kw) -> "Detection":
        return replace(self, **kw)


def _in_range(value: float, lo: float, hi: float) -> bool:
    # closed interval, tolerant to rounding in the ratio itself
    return lo - _EPS <= value <= hi + _EPS


def area_ratio_filter(dets: Sequence[Detection], frame_w: float, frame_h: float,
                      cfg: RefineConfig = RefineConfig()) -> list:
    if frame_w <= 0 or frame_h <= 0:
        raise ValueError("frame dimensions must be positive")
    lo, hi = cfg.area_ratio_lo, cfg.area_ratio_hi
    kept = []
    for d in dets:
        b = d.box
        if cfg.filter_mode == "area":
            ok = _in_range(b.w * b.h / (frame_w * frame_h), lo, hi)
        elif cfg.filter_mode == "side":
            ok = _in_range(b.w / frame_w, lo, hi) and _in_range(b.h / frame_h, lo, hi)
        else:
            ok = _in_range(min(b.w, b.h) / max(b.w, b.h), lo, hi)
        if ok:
            kept.append(d)
    return kept


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list:
    """Greedy suppression, highest score first.

    Ties in score are broken by ascending ``x`` then ``y``. Survivors are
    returned in that processing order.
    """
    order = sorted(dets, key=lambda d: (-d.score, d.box.x, d.box.y))
    kept: list = []
    for d in order:
        if all(aabb_iou(d.box, k.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def refine(dets: Sequence[Detection], frame_w: float, frame_h: float,
           cfg: RefineConfig = RefineConfig()) -> list:
    out = area_ratio_filter(dets, frame_w, frame_h, cfg)
    out = nms(out, cfg.nms_iou_threshold)
    return [d for d in out if d.score >= cfg.score_floor]
