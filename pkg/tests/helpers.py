"""Shared oracles and utilities for the test suite.

Every oracle here is written directly from first principles (exhaustive
enumeration, finite differences, pairwise counting) so it exercises a
different computational route than the library code it checks.
"""

import itertools

import numpy as np

from graftnet.tensor import Tensor, make_op


def weighted_sum(t, r):
    """Scalar projection sum(t * r) as a graph op, for gradient checks."""
    r = np.asarray(r, dtype=t.data.dtype)
    out = np.array((t.data * r).sum(), dtype=t.data.dtype)

    def backward_fn(g):
        t.accumulate_grad(g * r)

    return make_op(out, [t], backward_fn)


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar-valued f() wrt array x in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        f_plus = f()
        x[i] = orig - eps
        f_minus = f()
        x[i] = orig
        g[i] = (f_plus - f_minus) / (2 * eps)
    return g


def rel_err(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return np.abs(analytic - numeric).max() / scale


# ---------------------------------------------------------------------------
# transport (EMD) oracles


def emd_bruteforce(points_a, weights_a, points_b, weights_b, grain=1024):
    """Optimal transport cost by exhaustive search over assignments.

    Masses are rationalized to integer grains; each grain of supply is a unit
    that can go to any demand point, and the best assignment is found by
    enumerating permutations of the grain multiset. Exact for weights that
    are multiples of 1/grain (use such weights when calling this).
    """
    wa = np.rint(np.asarray(weights_a, dtype=np.float64) * grain).astype(int)
    wb = np.rint(np.asarray(weights_b, dtype=np.float64) * grain).astype(int)
    assert wa.sum() == wb.sum(), "oracle needs equal integer total mass"
    cost = np.sqrt(
        ((np.asarray(points_a)[:, None, :] - np.asarray(points_b)[None, :, :]) ** 2).sum(-1)
    )
    supply = [i for i, c in enumerate(wa) for _ in range(c)]
    demand = [j for j, c in enumerate(wb) for _ in range(c)]
    best = np.inf
    for perm in set(itertools.permutations(demand)):
        total = sum(cost[i, j] for i, j in zip(supply, perm))
        best = min(best, total)
    return best / grain


def emd_bruteforce_vectorized(points_a, weights_a, points_b, weights_b, grain=12):
    """Same idea as emd_bruteforce but evaluates all permutations as one
    numpy gather; practical up to ~8 grains."""
    wa = np.rint(np.asarray(weights_a, dtype=np.float64) * grain).astype(int)
    wb = np.rint(np.asarray(weights_b, dtype=np.float64) * grain).astype(int)
    assert wa.sum() == wb.sum() and wa.sum() <= 8, "vectorized oracle caps at 8 mass grains"
    cost = np.sqrt(
        ((np.asarray(points_a)[:, None, :] - np.asarray(points_b)[None, :, :]) ** 2).sum(-1)
    )
    supply = np.array([i for i, c in enumerate(wa) for _ in range(c)])
    demand = [j for j, c in enumerate(wb) for _ in range(c)]
    perms = np.array(sorted(set(itertools.permutations(demand))))
    totals = cost[supply[None, :], perms].sum(axis=1)
    return totals.min() / grain


def random_integer_signature(rng, size, dim, grain):
    """Points plus weights that are multiples of 1/grain (oracle-friendly)."""
    points = rng.normal(0, 1, size=(size, dim))
    cuts = np.sort(rng.choice(np.arange(1, grain), size=size - 1, replace=False)) if size > 1 else np.array([], dtype=int)
    masses = np.diff(np.r_[0, cuts, grain])
    return points, masses / grain


# ---------------------------------------------------------------------------
# ranking metric oracles


def auc_pairwise(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(equal), by explicit pair counting."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    return (np.sum(diff > 0) + 0.5 * np.sum(diff == 0)) / (len(pos) * len(neg))


def roc_threshold_sweep(scores, labels):
    """(fpr, tpr) by directly sweeping every distinct score as a threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    p = (labels == 1).sum()
    n = (labels == 0).sum()
    pts = [(0.0, 0.0)]
    for thr in np.unique(scores)[::-1]:
        pred = scores >= thr
        pts.append(((pred & (labels == 0)).sum() / n, (pred & (labels == 1)).sum() / p))
    return pts


# ---------------------------------------------------------------------------
# per-layer gradient checks (shared by the layer tests and the acceptance run)


def layer_grad_check(layer, rng):
    """Max relative error between analytic and central-difference gradients
    for one random point of the named layer, in double precision."""
    from graftnet import layers
    from graftnet.tensor import Tensor, backward

    def run(build_loss, arrays):
        params = [Tensor(a, requires_grad=True) for a in arrays]
        loss = build_loss(params)
        backward(loss)
        analytic = [p.grad.copy() for p in params]
        worst = 0.0
        for i, arr in enumerate(arrays):
            def f(i=i):
                frozen = [Tensor(a) for a in arrays]
                return float(build_loss(frozen).data)
            worst = max(worst, rel_err(analytic[i], numeric_grad(f, arrays[i])))
        return worst

    if layer == "conv2d":
        x = rng.normal(0, 1, (2, 3, 6, 6))
        w = rng.normal(0, 0.5, (4, 3, 3, 3))
        b = rng.normal(0, 0.1, (4,))
        stride = int(rng.choice([1, 2]))
        r = rng.normal(0, 1, (2, 4) + ((6, 6) if stride == 1 else (3, 3)))
        return run(lambda ps: weighted_sum(layers.conv2d(ps[0], ps[1], ps[2], stride=stride, padding=1), r), [x, w, b])

    if layer in ("batch_norm_train", "batch_norm_infer"):
        x = rng.normal(0.5, 1.0, (4, 3, 5, 5))
        gamma = rng.uniform(0.5, 1.5, (3,))
        beta = rng.normal(0, 0.3, (3,))
        r = rng.normal(0, 1, x.shape)
        mode = "train" if layer.endswith("train") else "infer"

        def build(ps):
            state = layers.BatchNormState(3, name="bn", dtype=np.float64)
            state.gamma = ps[1]
            state.beta = ps[2]
            state.running_mean = rng_state_mean
            state.running_var = rng_state_var
            return weighted_sum(layers.batch_norm(ps[0], state, mode=mode), r)

        rng_state_mean = rng.normal(0, 0.2, (3,))
        rng_state_var = rng.uniform(0.5, 1.5, (3,))
        return run(build, [x, gamma, beta])

    if layer == "relu":
        x = rng.normal(0, 1, (3, 4, 5))
        x = np.where(np.abs(x) < 0.1, x + 0.3, x)  # keep clear of the kink
        r = rng.normal(0, 1, x.shape)
        return run(lambda ps: weighted_sum(layers.relu(ps[0]), r), [x])

    if layer == "global_avg_pool":
        x = rng.normal(0, 1, (2, 4, 3, 5))
        r = rng.normal(0, 1, (2, 4))
        return run(lambda ps: weighted_sum(layers.global_avg_pool(ps[0]), r), [x])

    if layer == "bilinear_pool":
        x = rng.normal(0.8, 0.3, (2, 3, 4, 4))
        r = rng.normal(0, 1, (2, 9))
        return run(lambda ps: weighted_sum(layers.bilinear_pool(ps[0]), r), [x])

    if layer == "dense":
        v = rng.normal(0, 1, (3, 5))
        w = rng.normal(0, 0.5, (2, 5))
        b = rng.normal(0, 0.1, (2,))
        r = rng.normal(0, 1, (3, 2))
        return run(lambda ps: weighted_sum(layers.dense(ps[0], ps[1], ps[2]), r), [v, w, b])

    if layer == "softmax_cross_entropy":
        logits = rng.normal(0, 2, (4, 3))
        labels = rng.integers(0, 3, size=4)
        return run(lambda ps: layers.softmax_cross_entropy(ps[0], labels), [logits])

    raise ValueError(f"unknown layer {layer!r}")


GRAD_CHECK_LAYERS = (
    "conv2d",
    "batch_norm_train",
    "batch_norm_infer",
    "relu",
    "global_avg_pool",
    "bilinear_pool",
    "dense",
    "softmax_cross_entropy",
)

# ---------------------------------------------------------------------------
# planted mining instance


def planted_mining_instance(rng, per_blob=25, dim=8):
    """Positives at the origin; negatives in 8 tight blobs, 4 near (hard)
    and 4 far (easy). Returns (positives, negatives, hard_idx, easy_idx)."""
    positives = rng.normal(0, 0.3, (60, dim))
    # far radius stays within ~3x the near radius: k-means++ seeding mass is
    # proportional to squared distance, and a larger gap starves the near
    # blobs of centroids, merging them
    centers = np.zeros((8, dim))
    for i in range(4):
        centers[i, i] = 2.0      # hard: near the positive centroid
        centers[4 + i, 4 + i] = 6.0  # easy: well separated
    blobs = [c + rng.normal(0, 0.05, (per_blob, dim)) for c in centers]
    negatives = np.concatenate(blobs)
    hard_idx = np.arange(4 * per_blob)
    easy_idx = 4 * per_blob + np.arange(4 * per_blob)
    return positives, negatives, hard_idx, easy_idx
