"""Glue between localisation output and the Re-ID sample store."""

from __future__ import annotations

from typing import Callable, Optional

from .ingest import DatasetManifest, SampleSet, build_samples, load_image
from .loceval import label_detections

__all__ = ["samples_from_annotations", "samples_from_detections"]


def samples_from_annotations(manifest: DatasetManifest, annotations: dict, resolution: int = 128,
                             image_loader: Callable = load_image) -> SampleSet:
    """RGB-mask samples cut from ground-truth masks (the manual branch)."""
    inst = {f: [(a.mask, a.identity, a.track_id) for a in anns] for f, anns in annotations.items()}
    return build_samples(manifest, inst, resolution, image_loader=image_loader)


def samples_from_detections(manifest: DatasetManifest, detections: dict, annotations: Optional[dict] = None,
                            resolution: int = 128, image_loader: Callable = load_image,
                            geometry: str = "mask") -> SampleSet:
    """RGB-mask samples cut from detector masks (the automated branch).

    With ``annotations`` each detection takes the identity of the ground
    truth it matches, so the samples can be scored; otherwise they stay
    unlabelled.
    """
    if annotations is not None:
        labels = label_detections(annotations, detections, geometry)
    else:
        labels = {f: [None] * len(d) for f, d in detections.items()}
    inst = {f: [(d.mask, labels[f][j], d.track_id) for j, d in enumerate(dets)] for f, dets in detections.items()}
    return build_samples(manifest, inst, resolution, image_loader=image_loader)
