"""Synthetic dazzle-herd corpora with exact ground truth.

Identities carry seeded black/white blob coats painted on rotated ellipse
bodies. Scenes place them on a grid whose spacing sets the overlap, compose
them back to front, and record each identity's visible pixels as its mask.
:func:`corrupt` turns ground truth into imperfect detector output.
"""

from __future__ import annotations

import colorsys
import logging
import math
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import decode, encode, mask_to_aabb
from .ingest import (
    Annotation,
    AnnotationSet,
    DatasetManifest,
    Day,
    Frame,
    save_annotations,
    save_detections,
    save_image,
    save_manifest,
)
from .refine import Detection

log = logging.getLogger(__name__)

__all__ = [
    "SynthError",
    "OcclusionWarning",
    "IdentitySpec",
    "SceneSpec",
    "CorruptionSpec",
    "CorpusSpec",
    "Scene",
    "Corpus",
    "gen_identity_pattern",
    "make_identities",
    "pattern_difference",
    "gen_scene",
    "gen_corpus",
    "corrupt",
    "write_corpus",
]

MIN_PATTERN_DIFF = 0.05


class SynthError(ValueError):
    pass


class OcclusionWarning(UserWarning):
    pass


def _sub_seed(seed: int, *names) -> np.random.SeedSequence:
    keys = [zlib.crc32(str(n).encode()) for n in names]
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *keys])


# ------------------------------------------------------------------ identities


@dataclass(frozen=True)
class IdentitySpec:
    identity: str
    pattern_seed: int
    body_w: int = 64
    body_h: int = 32
    density: float = 0.5
    scale: float = 3.0
    mode: str = "pattern"        # or "solid"

    def __post_init__(self):
        if self.body_w < 2 or self.body_h < 2:
            raise SynthError("body dims must be at least 2 px")
        if not 0 <= self.density <= 1:
            raise SynthError("density must lie in [0, 1]")
        if self.mode not in ("pattern", "solid"):
            raise SynthError("mode must be 'pattern' or 'solid'")


def gen_identity_pattern(spec: IdentitySpec) -> np.ndarray:
    """Coat texture of shape ``(body_h, body_w, 3)``, uint8.

    ``pattern`` mode thresholds smoothed Gaussian noise so that exactly
    ``round(density * pixels)`` pixels are black. ``solid`` mode fills one
    saturated colour whose hue steps by the golden ratio per seed, so
    consecutive seeds stay far apart on the colour wheel.
    """
    h, w = spec.body_h, spec.body_w
    if spec.mode == "solid":
        hue = (spec.pattern_seed * 0.6180339887498949) % 1.0
        r, g, b = colorsys.hsv_to_rgb(hue, 0.85, 0.9)
        out = np.empty((h, w, 3), np.uint8)
        out[...] = (round(r * 255), round(g * 255), round(b * 255))
        return out
    rng = np.random.default_rng(spec.pattern_seed)
    field_ = gaussian_filter(rng.normal(size=(h, w)), sigma=spec.scale, mode="wrap")
    n_black = int(round(spec.density * h * w))
    order = np.argsort(field_.ravel(), kind="stable")
    black = np.zeros(h * w, bool)
    black[order[:n_black]] = True
    out = np.full((h * w, 3), 255, np.uint8)
    out[black] = 0
    return out.reshape(h, w, 3)


def pattern_difference(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of pixels whose colour differs."""
    return float(np.mean(np.any(a != b, axis=-1)))


def make_identities(n: int, seed: int = 0, body_w: int = 64, body_h: int = 32, density: float = 0.5,
                    scale: float = 3.0, mode: str = "pattern") -> list:
    """``n`` identities whose coats differ pairwise in at least 5% of pixels.

    A seed whose pattern collides with an earlier one is replaced by the next
    draw. Solid identities get evenly spaced hues instead.
    """
    ss = _sub_seed(seed, "identities")
    rng = np.random.default_rng(ss)
    specs, patterns = [], []
    for k in range(n):
        name = f"cow{k:03d}"
        for _ in range(1000):
            ps = k if mode == "solid" else int(rng.integers(0, 2**31 - 1))
            spec = IdentitySpec(name, ps, body_w, body_h, density, scale, mode)
            if mode == "solid":
                break
            pat = gen_identity_pattern(spec)
            if all(pattern_difference(pat, q) >= MIN_PATTERN_DIFF for q in patterns):
                break
            log.debug("pattern collision for %s, redrawing", name)
        else:
            raise SynthError("could not draw a distinct pattern")
        specs.append(spec)
        if mode == "pattern":
            patterns.append(pat)
    return specs


# ------------------------------------------------------------------ scenes


@dataclass(frozen=True)
class SceneSpec:
    width: int = 256
    height: int = 192
    n_frames: int = 3
    overlap: float = 0.0
    heading_sigma_deg: float = 10.0
    motion_step: float = 1.0
    day_id: str = "day0"
    start_time: float = 0.0
    background: tuple = (96, 128, 72)
    noise: float = 0.0
    seed: int = 0
    placements: Optional[tuple] = None   # explicit (cx, cy, theta) per identity

    def __post_init__(self):
        if self.n_frames < 1:
            raise SynthError("n_frames must be at least 1")
        if self.width < 8 or self.height < 8:
            raise SynthError("frame too small")
        if not 0 <= self.overlap < 1:
            raise SynthError("overlap must lie in [0, 1)")


@dataclass
class Scene:
    frames: list            # Frame
    images: dict            # frame_id -> uint8 H x W x 3
    annotations: AnnotationSet
    depth_order: list       # identities, back to front


def _ellipse_half_extent(a: float, b: float, theta: float) -> tuple:
    c, s = math.cos(theta), math.sin(theta)
    return math.sqrt((a * c) ** 2 + (b * s) ** 2), math.sqrt((a * s) ** 2 + (b * c) ** 2)


def _layout(spec: SceneSpec, ids: Sequence[IdentitySpec], rng: np.random.Generator) -> list:
    n = len(ids)
    bw = max(s.body_w for s in ids)
    bh = max(s.body_h for s in ids)
    max_theta = math.radians(min(3 * spec.heading_sigma_deg, 80))
    thetas = np.clip(rng.normal(0, math.radians(spec.heading_sigma_deg), n), -max_theta, max_theta)
    if spec.overlap == 0:
        ex, ey = _ellipse_half_extent(bw / 2, bh / 2, max_theta)
        step_x, step_y = 2 * ex + 2, 2 * ey + 2
    else:
        step_x, step_y = bw * (1 - spec.overlap), bh * (1 - spec.overlap)
    cols = max(1, min(n, int((spec.width - bw) // step_x) + 1))
    rows = math.ceil(n / cols)
    span_x = (cols - 1) * step_x
    span_y = (rows - 1) * step_y
    x0 = (spec.width - span_x) / 2
    y0 = (spec.height - span_y) / 2
    ex, ey = _ellipse_half_extent(bw / 2, bh / 2, max_theta)
    if x0 - ex < 0 or y0 - ey < 0:
        raise SynthError(f"{n} identities at overlap {spec.overlap} do not fit a {spec.width}x{spec.height} frame")
    cells = rng.permutation(cols * rows)[:n]
    out = []
    for k, cell in enumerate(cells):
        r, c = divmod(int(cell), cols)
        # stagger alternate rows so overlap is shared with both neighbours
        shift = (step_x / 2 if r % 2 and spec.overlap > 0 and cols > 1 else 0.0)
        cx = min(x0 + c * step_x + shift, spec.width - ex)
        out.append((cx, y0 + r * step_y, float(thetas[k])))
    return out


def _body_mask(h: int, w: int, spec: IdentitySpec, cx: float, cy: float, theta: float):
    """Boolean silhouette and the coat pixel coordinates behind each covered pixel."""
    a, b = spec.body_w / 2, spec.body_h / 2
    ex, ey = _ellipse_half_extent(a, b, theta)
    x_lo, x_hi = max(0, int(math.floor(cx - ex)) - 1), min(w, int(math.ceil(cx + ex)) + 1)
    y_lo, y_hi = max(0, int(math.floor(cy - ey)) - 1), min(h, int(math.ceil(cy + ey)) + 1)
    yy, xx = np.mgrid[y_lo:y_hi, x_lo:x_hi]
    dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
    c, s = math.cos(theta), math.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    tu = np.clip(np.floor(u + a).astype(int), 0, spec.body_w - 1)
    tv = np.clip(np.floor(v + b).astype(int), 0, spec.body_h - 1)
    return (y_lo, y_hi, x_lo, x_hi), inside, tv, tu


def gen_scene(spec: SceneSpec, identities: Sequence[IdentitySpec]) -> Scene:
    """Render ``n_frames`` frames with exact visible-pixel masks.

    Depth order is fixed for the scene: explicit placements are drawn in the
    given order, laid-out herds from the top row down and left to right
    within a row. Identities that end up with no visible pixel are left out of that frame's annotations with an
    :class:`OcclusionWarning`.
    """
    names = [s.identity for s in identities]
    if len(set(names)) != len(names):
        raise SynthError("identity labels must be unique")
    rng = np.random.default_rng(_sub_seed(spec.seed, "scene", spec.day_id))
    if spec.placements is not None:
        if len(spec.placements) != len(identities):
            raise SynthError("one placement per identity required")
        place = [tuple(map(float, p)) for p in spec.placements]
        for cx, cy, _ in place:
            if not (0 <= cx < spec.width and 0 <= cy < spec.height):
                raise SynthError("placement centre outside the frame")
    else:
        place = _layout(spec, identities, rng) if identities else []
    if spec.placements is not None:
        depth = list(range(len(identities)))
    else:
        # nearer the camera means lower in the frame; ties go right-in-front
        depth = sorted(range(len(identities)), key=lambda k: (round(place[k][1], 6), place[k][0]))
    coats = [gen_identity_pattern(s) for s in identities]
    headings = rng.uniform(0, 2 * math.pi, len(identities))

    frames, images = [], {}
    anns = AnnotationSet()
    H, W = spec.height, spec.width
    pos = [list(p) for p in place]
    for t in range(spec.n_frames):
        fid = f"{spec.day_id}_{t:04d}"
        img = np.empty((H, W, 3), np.uint8)
        img[...] = spec.background
        label = np.full((H, W), -1, np.int32)
        for k in depth:  # back to front
            cx, cy, th = pos[k]
            (y0, y1, x0, x1), inside, tv, tu = _body_mask(H, W, identities[k], cx, cy, th)
            region = img[y0:y1, x0:x1]
            region[inside] = coats[k][tv[inside], tu[inside]]
            label[y0:y1, x0:x1][inside] = k
        if spec.noise > 0:
            nrng = np.random.default_rng(_sub_seed(spec.seed, "noise", fid))
            img = np.clip(img + nrng.normal(0, spec.noise, img.shape), 0, 255).round().astype(np.uint8)
        frame_anns = []
        for k in sorted(range(len(identities)), key=lambda i: names[i]):
            bm = label == k
            if not bm.any():
                warnings.warn(f"{names[k]} fully occluded in {fid}; dropped from ground truth", OcclusionWarning)
                continue
            m = encode(bm)
            frame_anns.append(Annotation(fid, mask_to_aabb(m), m, names[k], f"trk_{names[k]}"))
        anns[fid] = frame_anns
        frames.append(Frame(fid, spec.start_time + t, f"images/{fid}.png", W, H, spec.day_id))
        images[fid] = img
        if spec.motion_step > 0:
            for k in range(len(pos)):
                headings[k] += rng.normal(0, 0.5)
                ex, ey = _ellipse_half_extent(identities[k].body_w / 2, identities[k].body_h / 2, pos[k][2])
                pos[k][0] = float(np.clip(pos[k][0] + spec.motion_step * math.cos(headings[k]), ex, W - ex))
                pos[k][1] = float(np.clip(pos[k][1] + spec.motion_step * math.sin(headings[k]), ey, H - ey))
    return Scene(frames, images, anns, [names[k] for k in depth])


# ------------------------------------------------------------------ corpora


@dataclass(frozen=True)
class CorpusSpec:
    n_days: int = 1
    n_identities: int = 20
    frames_per_day: int = 5
    width: int = 384
    height: int = 288
    body_w: int = 72
    body_h: int = 36
    overlap: float = 0.0
    heading_sigma_deg: float = 8.0
    motion_step: float = 1.0
    density: float = 0.5
    pattern_scale: float = 3.0
    mode: str = "pattern"
    noise: float = 0.0
    first_day: str = "2024-10-18"
    seed: int = 0

    def __post_init__(self):
        if self.n_days < 1 or self.n_identities < 1:
            raise SynthError("need at least one day and one identity")
        if self.frames_per_day < 1:
            raise SynthError("frames_per_day must be at least 1")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "CorpusSpec":
        d = dict(d or {})
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise SynthError(f"unknown synth keys: {sorted(bad)}")
        return cls(**d)


@dataclass
class Corpus:
    manifest: DatasetManifest
    images: dict
    annotations: AnnotationSet
    identities: list = field(default_factory=list)

    def image_loader(self):
        by_path = {str(Path(self.manifest.root) / f.image_path): self.images[fid]
                   for fid, f in self.manifest.frames.items()}
        return lambda p: by_path[str(p)]


def _day_ids(first: str, n: int) -> list:
    from datetime import date, timedelta

    try:
        d0 = date.fromisoformat(first)
    except ValueError:
        return [f"{first}{k}" for k in range(n)]
    return [(d0 + timedelta(days=k)).isoformat() for k in range(n)]


def gen_corpus(spec: CorpusSpec) -> Corpus:
    """Multi-day corpus: the same herd re-laid-out each day."""
    ids = make_identities(spec.n_identities, spec.seed, spec.body_w, spec.body_h, spec.density,
                          spec.pattern_scale, spec.mode)
    days, images = [], {}
    anns = AnnotationSet()
    for k, day in enumerate(_day_ids(spec.first_day, spec.n_days)):
        scene = gen_scene(SceneSpec(spec.width, spec.height, spec.frames_per_day, spec.overlap,
                                    spec.heading_sigma_deg, spec.motion_step, day, 0.0,
                                    noise=spec.noise, seed=spec.seed), ids)
        days.append(Day(day, tuple(scene.frames)))
        images.update(scene.images)
        anns.update(scene.annotations)
    return Corpus(DatasetManifest(tuple(days)), images, anns, ids)


def write_corpus(corpus: Corpus, out_dir, detections: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for fid, f in corpus.manifest.frames.items():
        save_image(corpus.images[fid], out / f.image_path)
    save_manifest(corpus.manifest, out / "manifest.json")
    save_annotations(corpus.annotations, out / "annotations.jsonl", corpus.manifest)
    if detections is not None:
        save_detections(detections, out / "detections.jsonl", corpus.manifest)
    return out


# ------------------------------------------------------------------ corruption


@dataclass(frozen=True)
class CorruptionSpec:
    jitter_sigma: float = 0.0
    drop_rate: float = 0.0
    split_rate: float = 0.0
    merge_rate: float = 0.0
    score_noise: float = 0.0

    def __post_init__(self):
        for name in ("drop_rate", "split_rate", "merge_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise SynthError(f"{name} must lie in [0, 1]")
        if self.jitter_sigma < 0 or self.score_noise < 0:
            raise SynthError("jitter_sigma and score_noise must be non-negative")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "CorruptionSpec":
        d = dict(d or {})
        bad = set(d) - set(cls.__dataclass_fields__)
        if bad:
            raise SynthError(f"unknown corruption keys: {sorted(bad)}")
        return cls(**d)


def _shift(bm: np.ndarray, dx: int, dy: int) -> np.ndarray:
    h, w = bm.shape
    out = np.zeros_like(bm)
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    if abs(dx) < w and abs(dy) < h:
        out[yd, xd] = bm[ys, xs]
    return out


def _split(bm: np.ndarray) -> tuple:
    """Halves on either side of the median along the principal axis."""
    ys, xs = np.nonzero(bm)
    if len(xs) < 2:
        return bm, None
    pts = np.c_[xs, ys].astype(float)
    centred = pts - pts.mean(0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    axis = vt[0] if vt[0][np.argmax(np.abs(vt[0]))] > 0 else -vt[0]
    proj = centred @ axis
    order = np.argsort(proj, kind="stable")
    first = np.zeros(len(xs), bool)
    first[order[: len(xs) // 2]] = True
    a, b = np.zeros_like(bm), np.zeros_like(bm)
    a[ys[first], xs[first]] = True
    b[ys[~first], xs[~first]] = True
    return a, b


def corrupt(gt: dict, c: CorruptionSpec = CorruptionSpec(), seed: int = 0) -> dict:
    """Detector-like output derived from ground truth.

    Every annotation draws the same random numbers whatever the rates, so
    sweeping one rate or ``jitter_sigma`` changes nothing else. Jitter is an
    integer shift of the whole instance; merges absorb the nearest remaining
    neighbour; splits cut along the principal axis and keep both halves on
    one track.
    """
    out = {}
    for fid in sorted(gt):
        anns = sorted(gt[fid], key=lambda a: str(a.identity))
        rng = np.random.default_rng(_sub_seed(seed, "corrupt", fid))
        u = rng.random((len(anns), 4))
        z = rng.normal(size=(len(anns), 3))
        masks = [decode(a.mask) if a.mask is not None else None for a in anns]
        centres = [np.array([a.box.x + a.box.w / 2, a.box.y + a.box.h / 2]) for a in anns]
        used = set()
        dets = []
        for i, a in enumerate(anns):
            if i in used:
                continue
            used.add(i)
            if u[i, 0] < c.drop_rate:
                continue
            bm = masks[i]
            if bm is None:
                raise SynthError("corrupt needs masks on every annotation")
            bm = bm.copy()
            merged = False
            if u[i, 2] < c.merge_rate:
                rest = [j for j in range(len(anns)) if j not in used]
                if rest:
                    j = min(rest, key=lambda j: (float(np.sum((centres[j] - centres[i]) ** 2)), j))
                    used.add(j)
                    bm |= masks[j]
                    merged = True
            pieces = [bm]
            if u[i, 1] < c.split_rate:
                a_half, b_half = _split(bm)
                pieces = [p for p in (a_half, b_half) if p is not None]
            score = 1.0 if c.score_noise == 0 else float(np.clip(1 - abs(z[i, 2]) * c.score_noise, 0, 1))
            dx = int(round(z[i, 0] * c.jitter_sigma))
            dy = int(round(z[i, 1] * c.jitter_sigma))
            untouched = not (dx or dy or merged or len(pieces) > 1)
            for p in pieces:
                if dx or dy:
                    p = _shift(p, dx, dy)
                if not p.any():
                    continue
                m = a.mask if untouched else encode(p)
                box = a.box if untouched else mask_to_aabb(m)
                dets.append(Detection(fid, box, score, m, a.track_id))
        out[fid] = dets
    return out
