"""Unsupervised contrastive embedder trained on co-temporal RGB-mask samples.

The encoder is a two-layer perceptron over block-averaged patches, with
embeddings projected onto the unit sphere. Training minimises NT-Xent on
batches drawn from a single timestamp: every animal appears at most once per
frame, so all other members of a batch are valid negatives without labels.
Positive pairs are two independent augmentations of the same sample.

Gradients are derived by hand and checked against finite differences in the
test-suite.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .ingest import SampleSet

log = logging.getLogger(__name__)

__all__ = [
    "EmbedderConfig",
    "AugmentConfig",
    "TrainConfig",
    "EmbedderModel",
    "EmbeddingSet",
    "Batch",
    "TrainResult",
    "TrainingDivergedError",
    "BatchInvariantError",
    "init_model",
    "extract_features",
    "forward",
    "ntxent_loss",
    "ntxent_grad",
    "loss_and_grad",
    "augment",
    "timestamp_groups",
    "timestamp_schedule",
    "timestamp_batch",
    "train",
    "embed",
    "save_model",
    "load_model",
]

CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class BatchInvariantError(ValueError):
    pass


@dataclass(frozen=True)
class EmbedderConfig:
    input_resolution: int = 128
    feature_size: int = 32
    hidden: int = 128
    dim: int = 64
    nonlinearity: str = "tanh"

    def __post_init__(self):
        if self.nonlinearity not in _ACTIVATIONS:
            raise ValueError(f"nonlinearity must be one of {sorted(_ACTIVATIONS)}")
        if min(self.input_resolution, self.feature_size, self.hidden, self.dim) < 1:
            raise ValueError("embedder sizes must be positive")

    @property
    def n_features(self) -> int:
        return self.feature_size * self.feature_size * 3


@dataclass(frozen=True)
class AugmentConfig:
    flip: bool = False
    rotate_deg: float = 15.0
    crop_min: float = 0.8
    brightness: float = 0.2
    contrast: float = 0.2

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls(flip=False, rotate_deg=0.0, crop_min=1.0, brightness=0.0, contrast=0.0)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    lr: float = 0.01
    momentum: float = 0.9
    temperature: float = 0.1
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    val_every: int = 10

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr >= 0 and 0 <= momentum < 1")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "TrainConfig":
        d = dict(d or {})
        aug = AugmentConfig(**d.pop("augment", {}))
        emb = EmbedderConfig(**d.pop("embedder", {}))
        return cls(augment=aug, embedder=emb, **d)


# ------------------------------------------------------------------ model


def _tanh_grad(a, h):
    return 1.0 - h * h


def _relu(a):
    return np.maximum(a, 0.0)


def _relu_grad(a, h):
    return (a > 0).astype(a.dtype)


def _softplus(a):
    return np.logaddexp(0.0, a)


def _softplus_grad(a, h):
    return 1.0 / (1.0 + np.exp(-a))


_ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_grad),
    "relu": (_relu, _relu_grad),
    "softplus": (_softplus, _softplus_grad),
}

PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass
class EmbedderModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    config: EmbedderConfig = field(default_factory=EmbedderConfig)

    def params(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "EmbedderModel":
        return EmbedderModel(*(getattr(self, k).copy() for k in PARAM_NAMES), self.config)

    def check_finite(self):
        for k in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, k))):
                raise FloatingPointError(f"non-finite values in parameter {k}")


def init_model(config: EmbedderConfig = EmbedderConfig(), seed: int = 0) -> EmbedderModel:
    rng = np.random.default_rng(seed)
    f, hdn, d = config.n_features, config.hidden, config.dim
    W1 = rng.normal(0.0, 1.0 / math.sqrt(f), size=(hdn, f))
    W2 = rng.normal(0.0, 1.0 / math.sqrt(hdn), size=(d, hdn))
    return EmbedderModel(W1, np.zeros(hdn), W2, rng.normal(0.0, 0.01, size=d), config)


def extract_features(pixels: np.ndarray, config: EmbedderConfig = EmbedderConfig()) -> np.ndarray:
    """Block-average a square RGB patch to ``feature_size`` and scale to [0, 1].

    Accepts a single ``(R, R, 3)`` patch or a stack ``(N, R, R, 3)``.
    """
    arr = np.asarray(pixels)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    r = config.input_resolution
    if arr.shape[1:] != (r, r, 3):
        raise ValueError(f"expected patches of shape ({r}, {r}, 3), got {arr.shape[1:]}")
    fs = config.feature_size
    if r % fs == 0:
        k = r // fs
        pooled = arr.reshape(len(arr), fs, k, fs, k, 3).mean(axis=(2, 4))
    else:
        idx = np.minimum(((np.arange(fs) + 0.5) * r / fs).astype(int), r - 1)
        pooled = arr[:, idx[:, None], idx[None, :]].astype(float)
    feats = pooled.reshape(len(arr), -1) / 255.0
    return feats[0] if single else feats


def _forward_full(model: EmbedderModel, X: np.ndarray):
    act, _ = _ACTIVATIONS[model.config.nonlinearity]
    A = X @ model.W1.T + model.b1
    H = act(A)
    Z = H @ model.W2.T + model.b2
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise FloatingPointError("zero pre-normalisation embedding")
    return A, H, Z, norms, Z / norms


def forward(model: EmbedderModel, features: np.ndarray) -> np.ndarray:
    """Unit-norm embeddings for one feature vector or a batch of them."""
    model.check_finite()
    X = np.atleast_2d(np.asarray(features, dtype=float))
    if not np.all(np.isfinite(X)):
        raise FloatingPointError("non-finite input features")
    E = _forward_full(model, X)[-1]
    return E[0] if np.ndim(features) == 1 else E


# ------------------------------------------------------------------ loss


def _pair_index(n2: int) -> np.ndarray:
    n = n2 // 2
    return np.concatenate([np.arange(n, n2), np.arange(n)])


def _ntxent_parts(Z: np.ndarray, tau: float):
    Z = np.asarray(Z, dtype=float)
    n2 = len(Z)
    if n2 % 2 or n2 < 4:
        raise ValueError("NT-Xent needs 2N rows with N >= 2 positive pairs")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    En = Z / norms
    S = En @ En.T / tau
    np.fill_diagonal(S, -np.inf)
    m = S.max(axis=1, keepdims=True)
    P = np.exp(S - m)
    denom = P.sum(axis=1, keepdims=True)
    P /= denom
    lse = (m + np.log(denom)).ravel()
    pos = _pair_index(n2)
    per_anchor = lse - S[np.arange(n2), pos]
    return per_anchor, P, En, norms, pos


def ntxent_loss(Z: np.ndarray, tau: float = 0.1) -> float:
    """Normalised-temperature cross entropy over ``2N`` rows.

    Row ``i`` and row ``i + N`` form a positive pair; similarity is cosine.
    """
    per_anchor = _ntxent_parts(Z, tau)[0]
    return float(per_anchor.mean())


def ntxent_grad(Z: np.ndarray, tau: float = 0.1):
    """Loss and its gradient with respect to the (unnormalised) rows ``Z``."""
    per_anchor, P, En, norms, pos = _ntxent_parts(Z, tau)
    n2 = len(En)
    G = P.copy()
    G[np.arange(n2), pos] -= 1.0
    G /= n2
    dEn = (G + G.T) @ En / tau
    dZ = (dEn - En * np.sum(En * dEn, axis=1, keepdims=True)) / norms
    return float(per_anchor.mean()), dZ


def loss_and_grad(model: EmbedderModel, X: np.ndarray, tau: float = 0.1):
    """NT-Xent loss of a ``2N`` feature batch and exact parameter gradients."""
    _, act_grad = _ACTIVATIONS[model.config.nonlinearity]
    A, H, Z, _, _ = _forward_full(model, X)
    loss, dZ = ntxent_grad(Z, tau)
    if not math.isfinite(loss):
        raise TrainingDivergedError("non-finite loss")
    dW2 = dZ.T @ H
    db2 = dZ.sum(axis=0)
    dA = (dZ @ model.W2) * act_grad(A, H)
    dW1 = dA.T @ X
    db1 = dA.sum(axis=0)
    return loss, {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}


# ------------------------------------------------------------------ augmentation


def _rotate_nearest(img: np.ndarray, angle: float, fill) -> np.ndarray:
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w]
    c, s = math.cos(angle), math.sin(angle)
    sx = c * (xx - cx) + s * (yy - cy) + cx
    sy = -s * (xx - cx) + c * (yy - cy) + cy
    ix, iy = np.rint(sx).astype(int), np.rint(sy).astype(int)
    ok = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    out = np.empty_like(img)
    out[...] = np.asarray(fill, dtype=img.dtype)
    out[ok] = img[iy[ok], ix[ok]]
    return out


def _crop_resize(img: np.ndarray, scale: float, oy: float, ox: float) -> np.ndarray:
    h, w = img.shape[:2]
    ch, cw = max(1, round(h * scale)), max(1, round(w * scale))
    y0, x0 = int(oy * (h - ch)), int(ox * (w - cw))
    crop = img[y0:y0 + ch, x0:x0 + cw]
    ri = np.minimum(((np.arange(h) + 0.5) * ch / h).astype(int), ch - 1)
    ci = np.minimum(((np.arange(w) + 0.5) * cw / w).astype(int), cw - 1)
    return crop[ri[:, None], ci[None, :]]


def augment(pixels: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(),
            background=(0, 0, 0)) -> np.ndarray:
    """One random composition of flip, rotation, crop-resize and colour jitter.

    Every draw is taken from ``rng`` in a fixed order, so the result depends
    only on the generator state. Areas uncovered by rotation take
    ``background``.
    """
    img = np.asarray(pixels, dtype=np.uint8)
    u = rng.random(7)
    out = img
    if cfg.flip and u[0] < 0.5:
        out = out[:, ::-1]
    if cfg.rotate_deg > 0:
        angle = math.radians((2 * u[1] - 1) * cfg.rotate_deg)
        out = _rotate_nearest(out, angle, background)
    if cfg.crop_min < 1.0:
        scale = cfg.crop_min + (1 - cfg.crop_min) * u[2]
        out = _crop_resize(out, scale, u[3], u[4])
    if cfg.brightness > 0 or cfg.contrast > 0:
        b = 1 + (2 * u[5] - 1) * cfg.brightness
        c = 1 + (2 * u[6] - 1) * cfg.contrast
        f = out.astype(float)
        mean = f.mean()
        f = ((f - mean) * c + mean) * b
        out = np.clip(np.rint(f), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(out)


# ------------------------------------------------------------------ batching


def timestamp_groups(samples: SampleSet) -> list:
    """Sample indices grouped by ``(day, timestamp)``; only groups of two or more."""
    groups: dict = {}
    for i, (d, t) in enumerate(zip(samples.day_ids.tolist(), samples.timestamps.tolist())):
        groups.setdefault((d, t), []).append(i)
    out = [(k, np.array(v)) for k, v in sorted(groups.items()) if len(v) >= 2]
    if not out:
        raise BatchInvariantError("no timestamp has two or more samples")
    return out


def timestamp_schedule(n_groups: int, epoch: int, seed: int) -> int:
    """Group index for ``epoch``: round-robin over a seeded shuffle, reshuffled per cycle."""
    cycle, pos = divmod(epoch, n_groups)
    order = np.random.default_rng([seed, cycle]).permutation(n_groups)
    return int(order[pos])


@dataclass
class Batch:
    key: tuple
    indices: np.ndarray
    view_a: np.ndarray
    view_b: np.ndarray


def timestamp_batch(samples: SampleSet, epoch: int, seed: int = 0,
                    aug: AugmentConfig = AugmentConfig(), groups=None) -> Batch:
    """All samples of one timestamp, each contributing two augmented views."""
    groups = groups if groups is not None else timestamp_groups(samples)
    key, idx = groups[timestamp_schedule(len(groups), epoch, seed)]
    labels = [x for x in samples.identities[idx].tolist() if x]
    if len(labels) != len(set(labels)):
        raise BatchInvariantError(f"identity repeated within timestamp {key}")
    rng = np.random.default_rng([seed, epoch, 1])
    va, vb = [], []
    for i in idx:
        bg = tuple(int(c) for c in samples.backgrounds[i])
        va.append(augment(samples.pixels[i], rng, aug, bg))
        vb.append(augment(samples.pixels[i], rng, aug, bg))
    return Batch(key, idx, np.stack(va), np.stack(vb))


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    model: EmbedderModel
    losses: list
    best_epoch: Optional[int] = None
    val_scores: dict = field(default_factory=dict)
    seen_ids: frozenset = frozenset()


def train(samples: SampleSet, cfg: TrainConfig = TrainConfig(), model: Optional[EmbedderModel] = None,
          validate: Optional[Callable[[EmbedderModel], float]] = None) -> TrainResult:
    """SGD with momentum over timestamp-instanced batches, one batch per epoch.

    With ``validate`` the model is scored every ``val_every`` epochs (and at
    the end); the best-scoring snapshot is returned.
    """
    model = init_model(cfg.embedder, cfg.seed) if model is None else model.copy()
    groups = timestamp_groups(samples)
    velocity = {k: np.zeros_like(v) for k, v in model.params().items()}
    losses = []
    seen = set()
    best = (None, -math.inf, model.copy())
    scores = {}
    for epoch in range(cfg.epochs):
        batch = timestamp_batch(samples, epoch, cfg.seed, cfg.augment, groups)
        seen.update(samples.sample_ids[batch.indices].tolist())
        X = extract_features(np.concatenate([batch.view_a, batch.view_b]), cfg.embedder)
        loss, grads = loss_and_grad(model, X, cfg.temperature)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDivergedError(f"non-finite loss or gradient at epoch {epoch}")
        for k, g in grads.items():
            velocity[k] = cfg.momentum * velocity[k] + g
            getattr(model, k)[...] -= cfg.lr * velocity[k]
        model.check_finite()
        losses.append(loss)
        last = epoch == cfg.epochs - 1
        if validate is not None and ((epoch + 1) % cfg.val_every == 0 or last):
            score = float(validate(model))
            scores[epoch] = score
            if score > best[1]:
                best = (epoch, score, model.copy())
        log.debug("epoch %d loss %.5f", epoch, loss)
    if validate is not None and best[0] is not None:
        return TrainResult(best[2], losses, best[0], scores, frozenset(seen))
    return TrainResult(model, losses, None, scores, frozenset(seen))


@dataclass
class EmbeddingSet:
    sample_ids: np.ndarray
    vectors: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.sample_ids) != len(self.vectors):
            raise ValueError("sample_ids and vectors differ in length")
        if len(self.vectors) and not np.allclose(np.linalg.norm(self.vectors, axis=1), 1.0, atol=1e-6):
            raise ValueError("embedding vectors must be unit norm")

    def __len__(self):
        return len(self.vectors)


def embed(model: EmbedderModel, samples: SampleSet, batch_size: int = 512) -> EmbeddingSet:
    out = []
    for s in range(0, len(samples), batch_size):
        X = extract_features(samples.pixels[s:s + batch_size], model.config)
        out.append(forward(model, X))
    vecs = np.concatenate(out) if out else np.zeros((0, model.config.dim))
    return EmbeddingSet(samples.sample_ids.copy(), vecs, samples.identities.copy())


def save_model(model: EmbedderModel, path):
    np.savez(path, version=CHECKPOINT_VERSION, config=json.dumps(asdict(model.config), sort_keys=True),
             **model.params())


def load_model(path) -> EmbedderModel:
    with np.load(path, allow_pickle=False) as z:
        if int(z["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version")
        cfg = EmbedderConfig(**json.loads(str(z["config"])))
        return EmbedderModel(*(z[k].copy() for k in PARAM_NAMES), cfg)
