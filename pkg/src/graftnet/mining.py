"""Hard-negative mining over trunk features.

Negatives are clustered with k-means in trunk feature space; each cluster is
summarized as a weighted signature and compared to the positive set's
signature by earth mover's distance. Clusters near the positives are kept
whole (those are the hard negatives), far clusters are thinned to a retained
sample.

The transport problem is solved exactly as a linear program; signature sizes
stay small (<= 64) so exactness is cheap. Centroid cosine similarity against
the positive mean is reported per cluster for inspection but never drives
the keep decision.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog
from scipy.spatial.distance import cdist

from . import layers
from .backbone import load_trunk_blocks
from .data import load_image
from .tensor import as_tensor
from .validation import ensure_finite


@dataclass
class FeatureMatrix:
    """Row-aligned feature vectors and their source references."""

    rows: np.ndarray
    refs: list = field(default_factory=list)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ValueError(f"feature matrix must be 2-d, got shape {self.rows.shape}")
        ensure_finite(self.rows, "feature matrix")
        if not self.refs:
            self.refs = list(range(len(self.rows)))
        if len(self.refs) != len(self.rows):
            raise ValueError(f"{len(self.refs)} refs for {len(self.rows)} feature rows")

    def __len__(self):
        return len(self.rows)


def extract_features(trunk, images, refs=None):
    """Trunk forward + global average pooling, one row per image, input order.

    ``images`` is either an (N, C, H, W) array or a list of image paths.
    """
    if isinstance(images, (list, tuple)) and images and isinstance(images[0], (str, bytes, Path)):
        paths, arrays = [str(p) for p in images], []
        for p in paths:
            try:
                arrays.append(load_image(p))
            except (OSError, ValueError) as exc:
                raise type(exc)(f"failed to load image {p!r}: {exc}") from exc
        x = np.stack(arrays).astype(np.float32)
        refs = refs or paths
    else:
        x = np.asarray(images, dtype=np.float32)
    if x.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) images, got shape {x.shape}")
    t = as_tensor(x, "feature extraction input")
    for block in load_trunk_blocks(trunk):
        for unit in block:
            t = unit.forward(t, "infer")
    pooled = layers.global_avg_pool(t).data
    return FeatureMatrix(rows=pooled, refs=refs or list(range(len(x))))


# ---------------------------------------------------------------------------
# k-means


def _kmeanspp_init(x, k, rng):
    n = len(x)
    centroids = np.empty((k, x.shape[1]), dtype=x.dtype)
    centroids[0] = x[rng.integers(n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i:] = x[rng.integers(n, size=k - i)]
            break
        centroids[i] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centroids[i]) ** 2, axis=1))
    return centroids


def kmeans(x, k, seed=0, max_iters=100, return_history=False):
    """Lloyd's algorithm with k-means++ seeding, deterministic given seed.

    Returns (assignments, centroids, inertia); with ``return_history`` also
    the per-iteration inertia list, which is non-increasing.
    """
    x = np.asarray(getattr(x, "rows", x), dtype=np.float64)
    n = len(x)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n < k:
        raise ValueError(f"cannot form {k} clusters from {n} points")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(x, k, rng)
    history = []
    assignments = None
    for _ in range(max_iters):
        d2 = cdist(x, centroids, "sqeuclidean")
        new_assign = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new_assign].sum()))
        if assignments is not None and np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for c in range(k):
            members = x[assignments == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
            else:
                # deterministic restart on the point farthest from its centroid
                worst = d2[np.arange(n), assignments].argmax()
                centroids[c] = x[worst]
    inertia = history[-1]
    if return_history:
        return assignments, centroids, inertia, history
    return assignments, centroids, inertia


# ---------------------------------------------------------------------------
# signatures and EMD


@dataclass
class Signature:
    """Weighted point set; weights are positive and normalized to sum 1."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.points.ndim != 2 or len(self.points) < 1:
            raise ValueError(f"signature needs at least one point row, got shape {self.points.shape}")
        if self.weights.shape != (len(self.points),):
            raise ValueError(f"{len(self.points)} points but weights shape {self.weights.shape}")
        if np.any(self.weights <= 0):
            raise ValueError("signature weights must all be positive")
        total = self.weights.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"signature weights must sum to 1 within 1e-9, got {total}")

    def __len__(self):
        return len(self.points)


def build_signature(vectors, s=8, seed=0):
    """Summarize vectors as at most ``s`` weighted points: the vectors
    themselves (uniform weights) when few, else k-means sub-centroids with
    cluster mass fractions as weights."""
    x = np.asarray(getattr(vectors, "rows", vectors), dtype=np.float64)
    if x.ndim != 2 or len(x) < 1:
        raise ValueError(f"need a non-empty 2-d vector set, got shape {x.shape}")
    if len(x) <= s:
        return Signature(points=x.copy(), weights=np.full(len(x), 1.0 / len(x)))
    assignments, centroids, _ = kmeans(x, s, seed=seed)
    mass = np.bincount(assignments, minlength=s).astype(np.float64)
    live = mass > 0
    return Signature(points=centroids[live], weights=mass[live] / mass.sum())


def emd(a, b):
    """Exact earth mover's distance with Euclidean ground metric.

    Solved as the transportation linear program; one redundant marginal
    constraint is dropped so the system has full row rank.
    """
    cost = cdist(a.points, b.points, "euclidean")
    m, n = cost.shape
    if m == 1:
        return float(cost[0] @ b.weights)
    if n == 1:
        return float(a.weights @ cost[:, 0])
    a_eq = []
    b_eq = []
    for i in range(m):
        row = np.zeros((m, n))
        row[i, :] = 1.0
        a_eq.append(row.ravel())
        b_eq.append(a.weights[i])
    for j in range(n - 1):
        col = np.zeros((m, n))
        col[:, j] = 1.0
        a_eq.append(col.ravel())
        b_eq.append(b.weights[j])
    res = linprog(cost.ravel(), A_eq=np.array(a_eq), b_eq=np.array(b_eq), bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return max(float(res.fun), 0.0)


# ---------------------------------------------------------------------------
# mining


@dataclass
class MiningParams:
    k: int = 8
    signature_size: int = 8
    keep_fraction: float = 0.5
    far_retain_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.signature_size < 1:
            raise ValueError(f"signature_size must be >= 1, got {self.signature_size}")
        if not 0 < self.keep_fraction <= 1:
            raise ValueError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")
        if not 0 <= self.far_retain_rate <= 1:
            raise ValueError(f"far_retain_rate must be in [0, 1], got {self.far_retain_rate}")


def _cosine(u, v):
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(u @ v / (nu * nv))


def mine(positives, negatives, params):
    """Pick hard negatives: (kept negative indices, report).

    Clusters are ranked by EMD to the positive signature; the nearest
    ceil(keep_fraction * k) clusters are kept whole, the rest are thinned to
    far_retain_rate of their members (uniform, seed-deterministic).
    """
    pos = np.asarray(getattr(positives, "rows", positives), dtype=np.float64)
    neg = np.asarray(getattr(negatives, "rows", negatives), dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError(f"need non-empty positives and negatives, got {len(pos)} / {len(neg)}")
    k = min(params.k, len(neg))
    ss = np.random.SeedSequence([params.seed, 3])
    seeds = ss.generate_state(k + 3)
    assignments, centroids, _ = kmeans(neg, k, seed=int(seeds[0]))
    pos_sig = build_signature(pos, params.signature_size, seed=int(seeds[1]))
    pos_mean = pos.mean(axis=0)

    clusters = []
    for c in range(k):
        members = np.flatnonzero(assignments == c)
        if len(members) == 0:
            continue
        sig = build_signature(neg[members], params.signature_size, seed=int(seeds[3 + c]))
        clusters.append(
            {
                "cluster": int(c),
                "size": int(len(members)),
                "emd": emd(sig, pos_sig),
                "cosine_similarity": _cosine(centroids[c], pos_mean),
                "members": members,
            }
        )
    clusters.sort(key=lambda entry: (entry["emd"], entry["cluster"]))

    keep_whole = math.ceil(params.keep_fraction * len(clusters))
    retain_rng = np.random.default_rng(seeds[2])
    kept = []
    for rank, entry in enumerate(clusters):
        members = entry.pop("members")
        entry["rank"] = rank
        if rank < keep_whole:
            entry["kept_whole"] = True
            chosen = members
        else:
            entry["kept_whole"] = False
            take = int(round(params.far_retain_rate * len(members)))
            chosen = np.sort(retain_rng.choice(members, size=take, replace=False)) if take else np.array([], dtype=int)
        entry["kept_count"] = int(len(chosen))
        kept.extend(int(i) for i in chosen)

    report = {
        "clusters": clusters,
        "k": k,
        "keep_fraction": params.keep_fraction,
        "far_retain_rate": params.far_retain_rate,
        "positive_count": int(len(pos)),
        "negative_count": int(len(neg)),
        "kept_count": len(kept),
    }
    return sorted(kept), report
