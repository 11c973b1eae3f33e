"""Dataset files, frame sampling and RGB-mask sample construction.

File formats (all UTF-8 JSON, schema version 1):

``manifest.json``
    ``{"version": 1, "days": [{"day_id": "2024-10-18", "frames": [
    {"frame_id", "timestamp", "image_path", "width", "height"}]}]}``
``detections.jsonl``
    one line per frame: ``{"version": 1, "frame_id": ..., "detections":
    [{"box": [x, y, w, h], "score": s, "track_id"?: t, "rle"?: [counts]}]}``
``annotations.jsonl``
    same layout under the key ``"annotations"``; every entry carries a
    mandatory ``"identity"`` and ``"rle"``.

RLE counts are row-major and start with a background run.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import Aabb, Mask, MaskShapeError, decode, mask_to_aabb
from .refine import Detection

SCHEMA_VERSION = 1

__all__ = [
    "SCHEMA_VERSION",
    "IngestError",
    "MalformedFileError",
    "RleLengthError",
    "DuplicateIdentityError",
    "UnknownFrameError",
    "Frame",
    "Day",
    "DatasetManifest",
    "Annotation",
    "AnnotationSet",
    "RgbMaskSample",
    "SampleSet",
    "load_manifest",
    "save_manifest",
    "load_detections",
    "save_detections",
    "load_annotations",
    "save_annotations",
    "sample_once_per_second",
    "dc_color",
    "build_rgb_mask",
    "build_samples",
    "load_image",
    "save_image",
]


class IngestError(ValueError):
    """Base class for dataset loading failures."""


class MalformedFileError(IngestError):
    pass


class RleLengthError(IngestError):
    pass


class DuplicateIdentityError(IngestError):
    pass


class UnknownFrameError(IngestError):
    pass


@dataclass(frozen=True)
class Frame:
    frame_id: str
    timestamp: float
    image_path: str
    width: int
    height: int
    day_id: str = ""


@dataclass(frozen=True)
class Day:
    day_id: str
    frames: tuple = ()


@dataclass(frozen=True)
class DatasetManifest:
    days: tuple = ()
    version: int = SCHEMA_VERSION
    root: str = "."

    def __post_init__(self):
        days = tuple(
            Day(d.day_id, tuple(f if f.day_id == d.day_id else replace(f, day_id=d.day_id) for f in d.frames))
            for d in self.days
        )
        object.__setattr__(self, "days", days)
        seen = set()
        day_ids = set()
        for day in self.days:
            if day.day_id in day_ids:
                raise MalformedFileError(f"day {day.day_id!r} listed twice")
            day_ids.add(day.day_id)
            prev = -math.inf
            for f in day.frames:
                if f.frame_id in seen:
                    raise MalformedFileError(f"duplicate frame_id {f.frame_id!r}")
                seen.add(f.frame_id)
                if not f.timestamp > prev:
                    raise MalformedFileError(
                        f"timestamps not strictly increasing at {f.frame_id!r} in day {day.day_id}"
                    )
                prev = f.timestamp
                if f.width <= 0 or f.height <= 0:
                    raise MalformedFileError(f"frame {f.frame_id!r} has invalid size")
        object.__setattr__(self, "_index", {f.frame_id: f for d in self.days for f in d.frames})

    @property
    def frames(self) -> dict:
        return self._index

    @property
    def day_ids(self) -> list:
        return [d.day_id for d in self.days]

    def frame(self, frame_id: str) -> Frame:
        try:
            return self._index[frame_id]
        except KeyError:
            raise UnknownFrameError(f"unknown frame_id {frame_id!r}") from None

    def image_file(self, frame_id: str) -> Path:
        return Path(self.root) / self.frame(frame_id).image_path

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "days": [
                {
                    "day_id": d.day_id,
                    "frames": [
                        {"frame_id": f.frame_id, "timestamp": f.timestamp,
                         "image_path": f.image_path, "width": f.width, "height": f.height}
                        for f in d.frames
                    ],
                }
                for d in self.days
            ],
        }


@dataclass(frozen=True)
class Annotation:
    frame_id: str
    box: Aabb
    mask: Mask
    identity: str
    track_id: Optional[str] = None


class AnnotationSet(dict):
    """Mapping ``frame_id -> list[Annotation]`` with per-frame unique identities."""

    def validate(self):
        for fid, anns in self.items():
            ids = [a.identity for a in anns]
            if len(ids) != len(set(ids)):
                dup = sorted({i for i in ids if ids.count(i) > 1})
                raise DuplicateIdentityError(f"duplicate identity {dup} in frame {fid!r}")
        return self

    @property
    def identities(self) -> list:
        return sorted({a.identity for anns in self.values() for a in anns})

    def n_instances(self) -> int:
        return sum(len(v) for v in self.values())


@dataclass
class RgbMaskSample:
    pixels: np.ndarray
    timestamp: float
    day_id: str
    identity: Optional[str] = None
    source_track: Optional[str] = None
    background: tuple = (0, 0, 0)
    frame_id: str = ""
    sample_id: str = ""


# ------------------------------------------------------------------ io


def _read_json(path) -> object:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise MalformedFileError(f"{path}: invalid JSON ({e})") from e


def _iter_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedFileError(f"{path}:{lineno}: invalid JSON ({e})") from e
            if not isinstance(rec, dict):
                raise MalformedFileError(f"{path}:{lineno}: record is not an object")
            yield lineno, rec


def _check_version(rec: dict, where: str):
    v = rec.get("version", SCHEMA_VERSION)
    if v != SCHEMA_VERSION:
        raise MalformedFileError(f"{where}: unsupported schema version {v!r}")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    raw = _read_json(path)
    if not isinstance(raw, dict) or not isinstance(raw.get("days"), list):
        raise MalformedFileError(f"{path}: expected an object with a 'days' list")
    _check_version(raw, str(path))
    days = []
    try:
        for d in raw["days"]:
            day_id = str(d["day_id"])
            frames = tuple(
                Frame(str(f["frame_id"]), float(f["timestamp"]), str(f["image_path"]),
                      int(f["width"]), int(f["height"]), day_id)
                for f in d["frames"]
            )
            days.append(Day(day_id, frames))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, IngestError):
            raise
        raise MalformedFileError(f"{path}: bad manifest entry ({e!r})") from e
    return DatasetManifest(tuple(days), SCHEMA_VERSION, str(path.parent))


def save_manifest(manifest: DatasetManifest, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=1)
        fh.write("\n")


def _parse_box(raw, where) -> Aabb:
    try:
        x, y, w, h = (float(v) for v in raw)
        return Aabb(x, y, w, h)
    except (TypeError, ValueError) as e:
        raise MalformedFileError(f"{where}: bad box {raw!r}") from e


def _parse_rle(raw, frame: Frame, where) -> Mask:
    if not isinstance(raw, list) or not all(isinstance(c, int) and c >= 0 for c in raw):
        raise MalformedFileError(f"{where}: rle must be a list of non-negative integers")
    try:
        return Mask(frame.width, frame.height, tuple(raw))
    except MaskShapeError as e:
        raise RleLengthError(f"{where}: {e}") from e


def _box_list(b: Aabb) -> list:
    return [_num(b.x), _num(b.y), _num(b.w), _num(b.h)]


def _num(v):
    return int(v) if float(v).is_integer() else float(v)


def load_detections(path, manifest: DatasetManifest) -> dict:
    """Return ``frame_id -> list[Detection]``."""
    out: dict = {}
    for lineno, rec in _iter_jsonl(path):
        where = f"{path}:{lineno}"
        _check_version(rec, where)
        if "frame_id" not in rec or not isinstance(rec.get("detections"), list):
            raise MalformedFileError(f"{where}: need 'frame_id' and a 'detections' list")
        fid = str(rec["frame_id"])
        frame = manifest.frame(fid)
        if fid in out:
            raise MalformedFileError(f"{where}: frame {fid!r} repeated")
        dets = []
        for d in rec["detections"]:
            if not isinstance(d, dict) or "box" not in d:
                raise MalformedFileError(f"{where}: detection without 'box'")
            mask = _parse_rle(d["rle"], frame, where) if d.get("rle") is not None else None
            try:
                score = float(d.get("score", 1.0))
                track = d.get("track_id")
                dets.append(Detection(fid, _parse_box(d["box"], where), score, mask,
                                      None if track is None else str(track)))
            except ValueError as e:
                if isinstance(e, IngestError):
                    raise
                raise MalformedFileError(f"{where}: {e}") from e
        out[fid] = dets
    return out


def save_detections(dets_by_frame: dict, path, manifest: Optional[DatasetManifest] = None):
    order = list(manifest.frames) if manifest is not None else sorted(dets_by_frame)
    with open(path, "w", encoding="utf-8") as fh:
        for fid in order:
            if fid not in dets_by_frame:
                continue
            recs = []
            for d in dets_by_frame[fid]:
                r = {"box": _box_list(d.box), "score": d.score}
                if d.track_id is not None:
                    r["track_id"] = d.track_id
                if d.mask is not None:
                    r["rle"] = list(d.mask.runs)
                recs.append(r)
            fh.write(json.dumps({"version": SCHEMA_VERSION, "frame_id": fid, "detections": recs}) + "\n")


def load_annotations(path, manifest: DatasetManifest) -> AnnotationSet:
    out = AnnotationSet()
    for lineno, rec in _iter_jsonl(path):
        where = f"{path}:{lineno}"
        _check_version(rec, where)
        entries = rec.get("annotations", rec.get("detections"))
        if "frame_id" not in rec or not isinstance(entries, list):
            raise MalformedFileError(f"{where}: need 'frame_id' and an 'annotations' list")
        fid = str(rec["frame_id"])
        frame = manifest.frame(fid)
        if fid in out:
            raise MalformedFileError(f"{where}: frame {fid!r} repeated")
        anns = []
        for a in entries:
            if not isinstance(a, dict) or a.get("identity") is None or "box" not in a:
                raise MalformedFileError(f"{where}: annotation needs 'box' and 'identity'")
            if a.get("rle") is None:
                raise MalformedFileError(f"{where}: annotation needs 'rle'")
            track = a.get("track_id")
            anns.append(Annotation(fid, _parse_box(a["box"], where), _parse_rle(a["rle"], frame, where),
                                   str(a["identity"]), None if track is None else str(track)))
        ids = [a.identity for a in anns]
        if len(ids) != len(set(ids)):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DuplicateIdentityError(f"{where}: duplicate identity {dup} in frame {fid!r}")
        out[fid] = anns
    return out


def save_annotations(anns: AnnotationSet, path, manifest: Optional[DatasetManifest] = None):
    order = list(manifest.frames) if manifest is not None else sorted(anns)
    with open(path, "w", encoding="utf-8") as fh:
        for fid in order:
            if fid not in anns:
                continue
            recs = []
            for a in anns[fid]:
                r = {"box": _box_list(a.box), "identity": a.identity, "rle": list(a.mask.runs)}
                if a.track_id is not None:
                    r["track_id"] = a.track_id
                recs.append(r)
            fh.write(json.dumps({"version": SCHEMA_VERSION, "frame_id": fid, "annotations": recs}) + "\n")


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(pixels: np.ndarray, path):
    from PIL import Image

    Image.fromarray(np.asarray(pixels, dtype=np.uint8), "RGB").save(path, format="PNG")


# ------------------------------------------------------------------ sampling


def sample_once_per_second(frames: Sequence) -> list:
    """Keep the first frame at or after each whole-second boundary.

    ``frames`` may hold :class:`Frame` objects or bare timestamps.
    """
    kept = []
    next_boundary = None
    for f in frames:
        t = f.timestamp if hasattr(f, "timestamp") else float(f)
        if next_boundary is None or t >= next_boundary:
            kept.append(f)
            next_boundary = math.floor(t) + 1
    return kept


def dc_color(pixels: np.ndarray) -> tuple:
    """Per-channel mean colour of a frame, rounded half up to integers."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[0] * arr.shape[1] == 0:
        raise ValueError("dc_color needs a non-empty H x W x C frame")
    n = arr.shape[0] * arr.shape[1]
    sums = arr.reshape(n, -1).astype(np.int64).sum(axis=0)
    return tuple(int((2 * s + n) // (2 * n)) for s in sums)


def _nearest_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    ri = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    ci = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return img[ri[:, None], ci[None, :]]


def build_rgb_mask(pixels: np.ndarray, mask: Mask, out_resolution: int = 128, *,
                   timestamp: float = 0.0, day_id: str = "", identity=None,
                   source_track=None, frame_id: str = "", sample_id: str = "",
                   background: Optional[tuple] = None) -> RgbMaskSample:
    """Crop the mask's bounding box, paint non-mask pixels with the frame DC colour.

    The crop is resized (nearest neighbour) to ``out_resolution`` square.
    """
    frame = np.asarray(pixels, dtype=np.uint8)
    if frame.shape[:2] != (mask.height, mask.width):
        raise MaskShapeError(
            f"mask grid {mask.width}x{mask.height} does not match frame {frame.shape[1]}x{frame.shape[0]}"
        )
    box = mask_to_aabb(mask)  # raises EmptyMaskError
    bg = dc_color(frame) if background is None else tuple(background)
    x0, y0, x1, y1 = int(box.x), int(box.y), int(box.x + box.w), int(box.y + box.h)
    fg = decode(mask)[y0:y1, x0:x1]
    crop = np.empty((y1 - y0, x1 - x0, 3), dtype=np.uint8)
    crop[...] = np.array(bg, dtype=np.uint8)
    crop[fg] = frame[y0:y1, x0:x1][fg]
    patch = _nearest_resize(crop, out_resolution, out_resolution)
    return RgbMaskSample(patch, float(timestamp), day_id, identity, source_track, bg, frame_id, sample_id)


@dataclass
class SampleSet:
    """Columnar store of RGB-mask samples (``.npz`` on disk)."""

    pixels: np.ndarray
    timestamps: np.ndarray
    day_ids: np.ndarray
    identities: np.ndarray
    tracks: np.ndarray
    frame_ids: np.ndarray
    sample_ids: np.ndarray
    backgrounds: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.pixels)
        if self.backgrounds is None:
            self.backgrounds = np.zeros((n, 3), dtype=np.uint8)
        for name in ("timestamps", "day_ids", "identities", "tracks", "frame_ids", "sample_ids", "backgrounds"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has wrong length")
        if len(set(self.sample_ids.tolist())) != n:
            raise ValueError("sample ids must be unique")

    def __len__(self):
        return len(self.pixels)

    @classmethod
    def from_samples(cls, samples: Sequence[RgbMaskSample], resolution: int = 128) -> "SampleSet":
        if not samples:
            return cls(np.zeros((0, resolution, resolution, 3), np.uint8), np.zeros(0), *(np.array([], dtype=str),) * 5,
                       np.zeros((0, 3), np.uint8))
        return cls(
            np.stack([s.pixels for s in samples]).astype(np.uint8),
            np.array([s.timestamp for s in samples], dtype=float),
            np.array([s.day_id for s in samples], dtype=str),
            np.array(["" if s.identity is None else str(s.identity) for s in samples], dtype=str),
            np.array(["" if s.source_track is None else str(s.source_track) for s in samples], dtype=str),
            np.array([s.frame_id for s in samples], dtype=str),
            np.array([s.sample_id for s in samples], dtype=str),
            np.array([s.background for s in samples], dtype=np.uint8),
        )

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=int)
        return SampleSet(self.pixels[idx], self.timestamps[idx], self.day_ids[idx], self.identities[idx],
                         self.tracks[idx], self.frame_ids[idx], self.sample_ids[idx], self.backgrounds[idx])

    def sample(self, i: int) -> RgbMaskSample:
        ident = self.identities[i]
        track = self.tracks[i]
        return RgbMaskSample(self.pixels[i], float(self.timestamps[i]), str(self.day_ids[i]),
                             str(ident) or None, str(track) or None, tuple(int(c) for c in self.backgrounds[i]),
                             str(self.frame_ids[i]), str(self.sample_ids[i]))

    def labelled(self) -> np.ndarray:
        return np.flatnonzero(self.identities != "")

    def save(self, path):
        np.savez_compressed(path, version=SCHEMA_VERSION, pixels=self.pixels, timestamps=self.timestamps,
                            day_ids=self.day_ids, identities=self.identities, tracks=self.tracks,
                            frame_ids=self.frame_ids, sample_ids=self.sample_ids, backgrounds=self.backgrounds)

    @classmethod
    def load(cls, path) -> "SampleSet":
        with np.load(path, allow_pickle=False) as z:
            if int(z["version"]) != SCHEMA_VERSION:
                raise MalformedFileError(f"{path}: unsupported sample-set version")
            return cls(z["pixels"], z["timestamps"], z["day_ids"], z["identities"], z["tracks"],
                       z["frame_ids"], z["sample_ids"], z["backgrounds"])


def build_samples(manifest: DatasetManifest, instances: dict, resolution: int = 128,
                  frame_ids: Optional[Iterable[str]] = None, image_loader=load_image) -> SampleSet:
    """Build RGB-mask samples for every masked instance.

    ``instances`` maps ``frame_id`` to a list of ``(mask, identity, track)``
    tuples. Instances with empty masks are skipped.
    """
    samples = []
    wanted = list(manifest.frames) if frame_ids is None else list(frame_ids)
    for fid in wanted:
        items = instances.get(fid) or []
        if not items:
            continue
        frame = manifest.frame(fid)
        pixels = image_loader(manifest.image_file(fid))
        bg = dc_color(pixels)
        for k, (mask, identity, track) in enumerate(items):
            if mask is None or mask.is_empty:
                continue
            samples.append(build_rgb_mask(
                pixels, mask, resolution, timestamp=frame.timestamp, day_id=frame.day_id,
                identity=identity, source_track=track, frame_id=fid,
                sample_id=f"{fid}#{k}", background=bg,
            ))
    return SampleSet.from_samples(samples, resolution)
