"""Re-identification evaluation: kNN, K-Means, partition agreement, fold protocols."""

from __future__ import annotations

import logging
import math
from collections import Counter
from fractions import Fraction
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln

from .assignment import hungarian_assign
from .embedder import TrainConfig, embed, train
from .ingest import SampleSet

log = logging.getLogger(__name__)

__all__ = [
    "ProtocolError",
    "KMeansResult",
    "Fold",
    "FoldPlan",
    "FoldReport",
    "ProtocolReport",
    "FOLD_MODES",
    "knn_classify",
    "kmeans",
    "contingency",
    "ari",
    "ami",
    "nmi",
    "hungarian_assign",
    "hungarian_accuracy",
    "make_fold_plan",
    "run_protocol",
    "pca_project_2d",
    "mean_std",
]

FOLD_MODES = ("within_day_k5", "day_wise_k9", "single_day")
METRICS = ("knn_accuracy", "ari", "ami", "nmi", "ha_accuracy")


class ProtocolError(ValueError):
    pass


# ------------------------------------------------------------------ kNN


def _unit(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    n = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(n > 0, n, 1.0)


def knn_classify(gallery: np.ndarray, gallery_labels: Sequence, queries: np.ndarray, k: int = 5,
                 query_labels: Optional[Sequence] = None):
    """Majority vote among the ``k`` nearest gallery vectors by cosine distance.

    A tie between labels goes to the tied label owning the single nearest
    neighbour. Returns ``(predictions, accuracy)``; accuracy is ``None``
    without ``query_labels``.
    """
    G = _unit(np.atleast_2d(gallery))
    labels = np.asarray(gallery_labels)
    if len(G) == 0 or len(labels) == 0:
        raise ValueError("empty gallery")
    if len(G) != len(labels):
        raise ValueError("gallery vectors and labels differ in length")
    if not 1 <= k <= len(G):
        raise ValueError(f"k={k} must lie in [1, {len(G)}]")
    Q = _unit(np.atleast_2d(queries))
    dist = 1.0 - Q @ G.T
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    preds = []
    for row in order:
        neigh = labels[row].tolist()
        counts = Counter(neigh)
        top = max(counts.values())
        tied = {lab for lab, c in counts.items() if c == top}
        preds.append(next(lab for lab in neigh if lab in tied))
    preds = np.array(preds, dtype=labels.dtype)
    acc = None
    if query_labels is not None:
        acc = float(np.mean(preds == np.asarray(query_labels))) if len(preds) else None
    return preds, acc


# ------------------------------------------------------------------ K-Means


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list = field(default_factory=list)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((X - X[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((X - X[nxt]) ** 2, axis=1))
    return X[chosen].copy()


def _lloyd(X, C, max_iter, tol):
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)
        labels = d2.argmin(axis=1)
        inertia = float(d2[np.arange(len(X)), labels].sum())
        history.append(inertia)
        newC = C.copy()
        for j in range(len(C)):
            members = X[labels == j]
            if len(members):
                newC[j] = members.mean(axis=0)
            else:
                # empty cluster: move it onto the worst-served point
                far = int(d2[np.arange(len(X)), labels].argmax())
                newC[j] = X[far]
        shift = float(np.sum((newC - C) ** 2))
        C = newC
        if shift <= tol:
            break
    d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(len(X)), labels].sum())
    history.append(inertia)
    return labels, C, inertia, history


def kmeans(X: np.ndarray, k: int, seed: int = 0, restarts: int = 10, max_iter: int = 300,
           tol: float = 1e-10) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds; best of ``restarts`` by inertia."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("kmeans needs a non-empty 2-D array")
    if not 1 <= k <= len(X):
        raise ValueError(f"k={k} must lie in [1, n={len(X)}]")
    best = None
    for r in range(max(1, restarts)):
        rng = np.random.default_rng([seed, r])
        labels, C, inertia, hist = _lloyd(X, _kmeans_pp(X, k, rng), max_iter, tol)
        if best is None or inertia < best.inertia:
            best = KMeansResult(labels, C, inertia, hist)
    return best


# ------------------------------------------------------------------ partition agreement


def contingency(a: Sequence, b: Sequence) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"partitions differ in length: {len(a)} vs {len(b)}")
    if len(a) < 1:
        raise ValueError("partitions must be non-empty")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    C = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(C, (ia, ib), 1)
    return C


def _same_partition(C: np.ndarray) -> bool:
    return C.shape[0] == C.shape[1] == np.count_nonzero(C)


def ari(a: Sequence, b: Sequence) -> float:
    """Adjusted Rand index (permutation-model expectation), in exact rational arithmetic."""
    C = contingency(a, b)
    if _same_partition(C):
        return 1.0

    def pairs(x):
        return sum(int(v) * (int(v) - 1) // 2 for v in np.ravel(x))

    sum_ij = pairs(C)
    sum_a, sum_b = pairs(C.sum(1)), pairs(C.sum(0))
    expected = Fraction(sum_a * sum_b, pairs([C.sum()]))
    max_index = Fraction(sum_a + sum_b, 2)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def _mutual_info(C: np.ndarray) -> float:
    n = C.sum()
    ra, rb = C.sum(1, keepdims=True), C.sum(0, keepdims=True)
    nz = C > 0
    return float((C[nz] / n * np.log(C[nz] * n / (ra @ rb)[nz])).sum())


def _expected_mutual_info(C: np.ndarray) -> float:
    n = int(C.sum())
    a = C.sum(1).astype(int)
    b = C.sum(0).astype(int)
    total = 0.0
    lg_n = gammaln(n + 1)
    for ai in a:
        for bj in b:
            lo, hi = max(1, ai + bj - n), min(ai, bj)
            if lo > hi:
                continue
            nij = np.arange(lo, hi + 1)
            log_p = (gammaln(ai + 1) + gammaln(bj + 1) + gammaln(n - ai + 1) + gammaln(n - bj + 1)
                     - lg_n - gammaln(nij + 1) - gammaln(ai - nij + 1) - gammaln(bj - nij + 1)
                     - gammaln(n - ai - bj + nij + 1))
            total += float(np.sum(nij / n * np.log(n * nij / (ai * bj)) * np.exp(log_p)))
    return total


def nmi(a: Sequence, b: Sequence) -> float:
    """Mutual information normalised by the arithmetic mean of the entropies."""
    C = contingency(a, b)
    ha, hb = _entropy(C.sum(1)), _entropy(C.sum(0))
    if ha == 0 and hb == 0:
        return 1.0
    return _mutual_info(C) / ((ha + hb) / 2)


def ami(a: Sequence, b: Sequence) -> float:
    """Mutual information adjusted for chance, arithmetic-mean normalisation."""
    C = contingency(a, b)
    if _same_partition(C):
        return 1.0
    mi = _mutual_info(C)
    emi = _expected_mutual_info(C)
    denom = (_entropy(C.sum(1)) + _entropy(C.sum(0))) / 2 - emi
    return (mi - emi) / denom


def hungarian_accuracy(true_labels: Sequence, clusters: Sequence) -> float:
    """Accuracy after the optimal one-to-one cluster -> label mapping."""
    C = contingency(clusters, true_labels)
    pairs = hungarian_assign(-C)
    return float(sum(C[i, j] for i, j in pairs) / C.sum())


# ------------------------------------------------------------------ folds


@dataclass(frozen=True)
class Fold:
    name: str
    train: tuple
    val: tuple
    test: tuple
    train_days: tuple = ()
    val_day: Optional[str] = None
    test_day: Optional[str] = None


@dataclass(frozen=True)
class FoldPlan:
    mode: str
    folds: tuple

    def __post_init__(self):
        for f in self.folds:
            tr, va, te = set(f.train), set(f.val), set(f.test)
            if tr & va or tr & te or va & te:
                raise ProtocolError(f"fold {f.name}: train/val/test overlap")


def _sample_table(samples) -> list:
    if isinstance(samples, SampleSet):
        return list(zip(samples.sample_ids.tolist(), samples.day_ids.tolist()))
    return [(str(s), str(d)) for s, d in samples]


def make_fold_plan(samples, mode: str, seed: int = 0, k: int = 5, day: Optional[str] = None,
                   days: Optional[Sequence[str]] = None) -> FoldPlan:
    """Build the cross-validation plan.

    ``samples`` is a :class:`SampleSet` or ``(sample_id, day_id)`` pairs.
    ``day_wise_k9`` needs exactly nine days (chronological by id): each day
    is tested once, the previous day (cyclically) validates and the other
    seven train. ``within_day_k5`` splits one day into ``k`` folds;
    ``single_day`` keeps only the first of those folds (an 80/20 split for
    ``k = 5``).
    """
    if mode not in FOLD_MODES:
        raise ProtocolError(f"mode must be one of {FOLD_MODES}")
    table = _sample_table(samples)
    by_day: dict = {}
    for sid, d in table:
        by_day.setdefault(d, []).append(sid)
    all_days = sorted(days) if days is not None else sorted(by_day)

    if mode == "day_wise_k9":
        if len(all_days) != 9:
            raise ProtocolError(f"day_wise_k9 needs 9 days, got {len(all_days)}")
        folds = []
        for i, test_day in enumerate(all_days):
            val_day = all_days[i - 1]
            train_days = tuple(d for d in all_days if d not in (test_day, val_day))
            folds.append(Fold(
                test_day,
                tuple(s for d in train_days for s in by_day.get(d, [])),
                tuple(by_day.get(val_day, [])),
                tuple(by_day.get(test_day, [])),
                train_days, val_day, test_day,
            ))
        return FoldPlan(mode, tuple(folds))

    target = day if day is not None else (all_days[0] if all_days else None)
    if target not in by_day:
        raise ProtocolError(f"day {target!r} has no samples")
    ids = by_day[target]
    if len(ids) < k:
        raise ProtocolError(f"need at least {k} samples on {target}, got {len(ids)}")
    perm = np.random.default_rng(seed).permutation(len(ids))
    chunks = np.array_split(perm, k)
    folds = []
    for f, chunk in enumerate(chunks):
        test = set(chunk.tolist())
        folds.append(Fold(
            f"{target}/fold{f}",
            tuple(ids[i] for i in range(len(ids)) if i not in test),
            (),
            tuple(ids[i] for i in sorted(test)),
            (target,), None, target,
        ))
    if mode == "single_day":
        folds = folds[:1]
    return FoldPlan(mode, tuple(folds))


# ------------------------------------------------------------------ protocol


@dataclass
class FoldReport:
    fold: str
    knn_accuracy: float
    ari: float
    ami: float
    nmi: float
    ha_accuracy: float
    n_train: int = 0
    n_test: int = 0
    n_identities: int = 0
    best_epoch: Optional[int] = None
    losses: list = field(default_factory=list)

    def metrics(self) -> dict:
        return {m: getattr(self, m) for m in METRICS}


@dataclass
class ProtocolReport:
    mode: str
    folds: list
    aggregate: dict        # metric -> (mean, std)
    embeddings: dict = field(default_factory=dict)   # fold -> (EmbeddingSet, kmeans labels)


def mean_std(values: Sequence[float]) -> tuple:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return (math.nan, math.nan)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def _fold_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _run_fold(samples: SampleSet, fold: Fold, cfg: TrainConfig, index: int, k_nn: int,
              restarts: int, keep_embeddings: bool):
    pos = {s: i for i, s in enumerate(samples.sample_ids.tolist())}
    tr = np.array([pos[s] for s in fold.train], dtype=int)
    va = np.array([pos[s] for s in fold.val], dtype=int)
    te = np.array([pos[s] for s in fold.test], dtype=int)
    train_set, val_set, test_set = samples.subset(tr), samples.subset(va), samples.subset(te)
    test_set = test_set.subset(test_set.labelled())
    test_ids = set(test_set.identities.tolist())
    if len(test_ids) < 2:
        raise ProtocolError(f"fold {fold.name}: test split has {len(test_ids)} identities, need 2")
    gallery_set = train_set.subset(train_set.labelled())
    if len(gallery_set) == 0:
        raise ProtocolError(f"fold {fold.name}: no labelled training samples for the kNN gallery")
    k = min(k_nn, len(gallery_set))

    fold_cfg = replace(cfg, seed=_fold_seed(cfg.seed, index))
    val_lab = val_set.subset(val_set.labelled()) if len(val_set) else val_set

    def val_knn(model):
        g = embed(model, gallery_set)
        q = embed(model, val_lab)
        return knn_classify(g.vectors, g.labels, q.vectors, k, q.labels)[1]

    validate = val_knn if len(val_lab) else None

    result = train(train_set, fold_cfg, validate=validate)
    leaked = result.seen_ids & set(fold.test)
    if leaked:
        raise ProtocolError(f"fold {fold.name}: {len(leaked)} test samples reached training")

    g = embed(result.model, gallery_set)
    q = embed(result.model, test_set)
    _, acc = knn_classify(g.vectors, g.labels, q.vectors, k, q.labels)
    km = kmeans(q.vectors, len(test_ids), seed=fold_cfg.seed, restarts=restarts)
    truth = q.labels
    rep = FoldReport(fold.name, acc, ari(truth, km.labels), ami(truth, km.labels), nmi(truth, km.labels),
                     hungarian_accuracy(truth, km.labels), len(train_set), len(test_set), len(test_ids),
                     result.best_epoch, list(result.losses))
    return rep, ((q, km.labels) if keep_embeddings else None)


def run_protocol(samples: SampleSet, plan: FoldPlan, cfg: TrainConfig = TrainConfig(), k_nn: int = 5,
                 restarts: int = 10, workers: int = 1, keep_embeddings: bool = False) -> ProtocolReport:
    """Train and evaluate every fold; aggregate as mean and sample std."""
    jobs = list(enumerate(plan.folds))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            futs = [ex.submit(_run_fold, samples, f, cfg, i, k_nn, restarts, keep_embeddings) for i, f in jobs]
            results = [fu.result() for fu in futs]
    else:
        results = [_run_fold(samples, f, cfg, i, k_nn, restarts, keep_embeddings) for i, f in jobs]
    folds = [r for r, _ in results]
    for r in folds:
        log.info("fold %s: knn %.4f ari %.4f ha %.4f", r.fold, r.knn_accuracy, r.ari, r.ha_accuracy)
    agg = {m: mean_std([getattr(r, m) for r in folds]) for m in METRICS}
    emb = {r.fold: e for r, (_, e) in zip(folds, results) if e is not None}
    return ProtocolReport(plan.mode, folds, agg, emb)


# ------------------------------------------------------------------ projection


def pca_project_2d(X: np.ndarray) -> np.ndarray:
    """Scores on the top two principal axes.

    Each axis is signed so that its largest-magnitude loading is positive.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or len(X) < 2:
        raise ValueError("need at least 2 points")
    Xc = X - X.mean(axis=0)
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    out = np.zeros((len(X), 2))
    for c in range(min(2, len(Vt))):
        if s[c] <= 1e-12 * max(1.0, s[0]):
            continue
        v = Vt[c]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        out[:, c] = Xc @ v
    return out
