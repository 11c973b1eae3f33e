"""Localisation evaluation of detections against ground-truth annotations.

Per frame, predictions are matched one-to-one to ground truth by maximising
total IoU; zero-overlap pairs are discarded. Four clip-level numbers are
reported:

* ``mean_iou``: matched IoU averaged over every ground-truth instance, with
  missed instances contributing 0.
* ``tp_accuracy``: share of individuals whose clip-average IoU exceeds the
  well-detected threshold (or, in ``"mean_iou"`` mode, the average IoU of
  those individuals).
* ``usage_rate``: share of all detections matched at IoU above threshold.
* ``matching_rate``: share of ground-truth instances matched above threshold
  (``"det"`` direction divides by the detection count instead).
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .assignment import hungarian_assign
from .geometry import Obb, aabb_iou, mask_iou_matrix, min_area_obb, obb_iou

__all__ = [
    "GEOMETRIES",
    "GeometryModeError",
    "LocThresholds",
    "MatchResult",
    "FrameStat",
    "LocalisationReport",
    "iou_matrix",
    "match_frame",
    "match_clip",
    "associate_tracks",
    "per_individual_iou",
    "per_frame_series",
    "localisation_metrics",
    "evaluate",
    "label_detections",
]

GEOMETRIES = ("aabb", "obb", "mask")


class GeometryModeError(ValueError):
    """Requested geometry needs data (masks) that the inputs do not carry."""


@dataclass(frozen=True)
class LocThresholds:
    well_detected: float = 0.7
    tp_mode: str = "fraction"          # or "mean_iou"
    matching_direction: str = "gt"     # or "det"

    def __post_init__(self):
        if self.tp_mode not in ("fraction", "mean_iou"):
            raise ValueError("tp_mode must be 'fraction' or 'mean_iou'")
        if self.matching_direction not in ("gt", "det"):
            raise ValueError("matching_direction must be 'gt' or 'det'")
        if not 0 <= self.well_detected < 1:
            raise ValueError("well_detected must lie in [0, 1)")


@dataclass
class MatchResult:
    frame_id: str
    pairs: list                  # (gt identity, detection index, iou)
    unmatched_gt: list           # identities
    unmatched_det: list          # detection indices
    n_det: int = 0

    @property
    def n_gt(self) -> int:
        return len(self.pairs) + len(self.unmatched_gt)

    def iou_of(self, identity) -> float:
        for ident, _, iou in self.pairs:
            if ident == identity:
                return iou
        return 0.0


@dataclass(frozen=True)
class FrameStat:
    frame_id: str
    mean_iou: Optional[float]
    usage_rate: Optional[float]


@dataclass
class LocalisationReport:
    geometry: str
    mean_iou: Optional[float]
    tp_accuracy: Optional[float]
    usage_rate: Optional[float]
    matching_rate: Optional[float]
    per_frame: list = field(default_factory=list)
    per_individual: dict = field(default_factory=dict)
    n_gt: int = 0
    n_det: int = 0

    def summary(self) -> dict:
        return {"iou": self.mean_iou, "tp_accuracy": self.tp_accuracy,
                "usage_rate": self.usage_rate, "matching_rate": self.matching_rate,
                "n_gt": self.n_gt, "n_det": self.n_det}


def _obb_of(item) -> Obb:
    mask = getattr(item, "mask", None)
    if mask is not None and not mask.is_empty:
        return min_area_obb(mask)
    return Obb.from_aabb(item.box)


def iou_matrix(gt: Sequence, dets: Sequence, geometry: str = "mask") -> np.ndarray:
    """IoU between every ground-truth item (rows) and detection (columns)."""
    if geometry not in GEOMETRIES:
        raise ValueError(f"geometry must be one of {GEOMETRIES}")
    M = np.zeros((len(gt), len(dets)))
    if not len(gt) or not len(dets):
        return M
    if geometry == "mask":
        if any(getattr(x, "mask", None) is None for x in (*gt, *dets)):
            raise GeometryModeError("mask geometry requested but some items carry no mask")
        M = mask_iou_matrix([g.mask for g in gt], [d.mask for d in dets])
        return np.nan_to_num(M, nan=0.0)
    if geometry == "aabb":
        for i, g in enumerate(gt):
            for j, d in enumerate(dets):
                M[i, j] = aabb_iou(g.box, d.box)
        return M
    go = [_obb_of(g) for g in gt]
    do = [_obb_of(d) for d in dets]
    for i, g in enumerate(go):
        for j, d in enumerate(do):
            M[i, j] = obb_iou(g, d)
    return M


def match_frame(gt: Sequence, dets: Sequence, geometry: str = "mask",
                frame_id: str = "", ious: Optional[np.ndarray] = None) -> MatchResult:
    """Optimal one-to-one matching maximising the summed IoU."""
    if ious is None:
        ious = iou_matrix(gt, dets, geometry)
    pairs = []
    matched_g, matched_d = set(), set()
    if len(gt) and len(dets):
        for i, j in hungarian_assign(-ious):
            if ious[i, j] > 0:
                pairs.append((gt[i].identity, j, float(ious[i, j])))
                matched_g.add(i)
                matched_d.add(j)
    return MatchResult(
        frame_id,
        pairs,
        [g.identity for i, g in enumerate(gt) if i not in matched_g],
        [j for j in range(len(dets)) if j not in matched_d],
        len(dets),
    )


def match_clip(annotations: dict, detections: dict, geometry: str = "mask",
               frame_ids: Optional[Iterable[str]] = None) -> list:
    if frame_ids is None:
        frame_ids = list(annotations) + [f for f in detections if f not in annotations]
    return [match_frame(annotations.get(f, []), detections.get(f, []), geometry, f) for f in frame_ids]


def associate_tracks(matches: Sequence[MatchResult], detections: dict) -> dict:
    """Map each ground-truth identity to the detection track it is matched with most often.

    Ties go to the lexicographically smallest track id.
    """
    votes: dict = defaultdict(Counter)
    for m in matches:
        dets = detections.get(m.frame_id, [])
        for ident, j, _ in m.pairs:
            track = dets[j].track_id
            if track is not None:
                votes[ident][track] += 1
    return {ident: min(c, key=lambda t: (-c[t], t)) for ident, c in votes.items()}


def per_individual_iou(matches: Sequence[MatchResult], association: Optional[dict] = None,
                       detections: Optional[dict] = None) -> dict:
    """Average IoU per identity over every frame where it appears in ground truth.

    Frames where the identity is unmatched contribute 0. With ``association``
    (identity -> track) a frame's match only counts when the matched
    detection belongs to the associated track.
    """
    sums: dict = defaultdict(float)
    counts: dict = defaultdict(int)
    for m in matches:
        dets = detections.get(m.frame_id, []) if detections is not None else None
        for ident, j, iou in m.pairs:
            if association is not None:
                if dets is None or association.get(ident) != dets[j].track_id:
                    iou = 0.0
            sums[ident] += iou
            counts[ident] += 1
        for ident in m.unmatched_gt:
            counts[ident] += 1
    return {ident: sums[ident] / counts[ident] for ident in sorted(counts)}


def per_frame_series(matches: Sequence[MatchResult], threshold: float = 0.7) -> list:
    out = []
    for m in matches:
        mean = sum(iou for _, _, iou in m.pairs) / m.n_gt if m.n_gt else None
        usage = sum(1 for _, _, iou in m.pairs if iou > threshold) / m.n_det if m.n_det else None
        out.append(FrameStat(m.frame_id, mean, usage))
    return out


def localisation_metrics(matches: Sequence[MatchResult], per_individual: Optional[dict] = None,
                         thresholds: LocThresholds = LocThresholds(), geometry: str = "") -> LocalisationReport:
    thr = thresholds.well_detected
    n_gt = sum(m.n_gt for m in matches)
    n_det = sum(m.n_det for m in matches)
    ious = [iou for m in matches for _, _, iou in m.pairs]
    good = sum(1 for v in ious if v > thr)
    if per_individual is None:
        per_individual = per_individual_iou(matches)

    mean_iou = float(np.sum(ious)) / n_gt if n_gt else None
    usage = good / n_det if n_det else None
    if thresholds.matching_direction == "gt":
        matching = good / n_gt if n_gt else None
    else:
        matching = usage

    well = [v for v in per_individual.values() if v > thr]
    if not per_individual:
        tp = None
    elif thresholds.tp_mode == "fraction":
        tp = len(well) / len(per_individual)
    else:
        tp = float(np.mean(well)) if well else None

    return LocalisationReport(geometry, mean_iou, tp, usage, matching,
                              per_frame_series(matches, thr), dict(per_individual), n_gt, n_det)


def evaluate(annotations: dict, detections: dict, geometry: str = "mask",
             thresholds: LocThresholds = LocThresholds(), frame_ids=None,
             use_tracks: bool = False) -> LocalisationReport:
    """Match a whole clip and compute its localisation report."""
    matches = match_clip(annotations, detections, geometry, frame_ids)
    assoc = associate_tracks(matches, detections) if use_tracks else None
    per_ind = per_individual_iou(matches, assoc, detections if use_tracks else None)
    return localisation_metrics(matches, per_ind, thresholds, geometry)


def label_detections(annotations: dict, detections: dict, geometry: str = "mask") -> dict:
    """Give each detection the identity of the ground truth it matches.

    Unmatched detections inherit the majority identity of their track unless
    that identity is already present in the frame; otherwise they stay
    ``None``. Labels therefore stay unique within a frame.
    """
    matches = match_clip(annotations, detections, geometry)
    labels = {fid: [None] * len(dets) for fid, dets in detections.items()}
    track_votes: dict = defaultdict(Counter)
    for m in matches:
        dets = detections.get(m.frame_id, [])
        for ident, j, _ in m.pairs:
            labels[m.frame_id][j] = ident
            if dets[j].track_id is not None:
                track_votes[dets[j].track_id][ident] += 1
    track_identity = {t: min(c, key=lambda i: (-c[i], i)) for t, c in track_votes.items()}
    for fid, dets in detections.items():
        for j, d in enumerate(dets):
            if labels[fid][j] is None and d.track_id in track_identity:
                ident = track_identity[d.track_id]
                if ident not in labels[fid]:
                    labels[fid][j] = ident
    return labels
