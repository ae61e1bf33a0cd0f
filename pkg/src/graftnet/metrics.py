"""ROC/AUC, threshold metrics, best-threshold selection, report rendering.

Scores are positive-class probabilities. The decision rule everywhere is
"predict positive iff score >= threshold", so very high thresholds like
0.9999 remain meaningful operating points.
"""

import json
from dataclasses import dataclass, field

import numpy as np

CRITERIA = ("youden", "accuracy", "f1")


@dataclass
class ScoredSet:
    """Per-sample positive-class scores with binary ground truth."""

    scores: np.ndarray
    labels: np.ndarray
    attribute: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.ndim != 1 or self.scores.shape != self.labels.shape:
            raise ValueError(
                f"scores and labels must be equal-length vectors, got {self.scores.shape} and {self.labels.shape}"
            )
        if len(self.scores) == 0:
            raise ValueError("empty scored set")
        if self.scores.min() < 0 or self.scores.max() > 1:
            raise ValueError(
                f"scores must be probabilities in [0, 1], got range [{self.scores.min()}, {self.scores.max()}]"
            )
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")

    @property
    def positives(self):
        return int(self.labels.sum())

    @property
    def negatives(self):
        return int(len(self.labels) - self.labels.sum())


@dataclass
class MetricRow:
    threshold: float
    accuracy: float
    precision: float
    recall: float
    fpr: float
    no_positive_predictions: bool = False  # precision degenerate, reported as 1.0

    def to_dict(self):
        d = {
            "threshold": self.threshold,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "fpr": self.fpr,
        }
        if self.no_positive_predictions:
            d["no_positive_predictions"] = True
        return d


def _grouped_counts(scored):
    """Distinct scores descending with cumulative TP/FP counts at each."""
    order = np.argsort(-scored.scores, kind="stable")
    s = scored.scores[order]
    y = scored.labels[order]
    ends = np.flatnonzero(np.r_[np.diff(s) != 0, True])
    return s[ends], np.cumsum(y)[ends], np.cumsum(1 - y)[ends]


def roc_table(scored):
    """(fpr, tpr, threshold) triples: the (0,0) anchor (threshold inf — no
    sample reaches it) then one point per distinct score, grouping ties."""
    p, n = scored.positives, scored.negatives
    if p == 0 or n == 0:
        raise ValueError(
            f"ROC needs both classes; {scored.attribute or 'set'} has {p} positives and {n} negatives"
        )
    thr, tp, fp = _grouped_counts(scored)
    rows = [(0.0, 0.0, float("inf"))]
    rows.extend(
        (float(fp_i) / n, float(tp_i) / p, float(t)) for t, tp_i, fp_i in zip(thr, tp, fp)
    )
    return rows


def roc_curve(scored):
    """(FPR, TPR) points sorted along the curve from (0,0) to (1,1)."""
    return [(f, t) for f, t, _ in roc_table(scored)]


def auc(curve):
    """Trapezoidal area under a (FPR, TPR) point list."""
    pts = np.asarray(curve, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] < 2:
        raise ValueError(f"need at least two (FPR, TPR) points, got shape {pts.shape}")
    return float(np.trapezoid(pts[:, 1], pts[:, 0]))


def threshold_metrics(scored, thr):
    """Confusion metrics at one threshold under the score >= thr rule."""
    if not 0 <= thr <= 1:
        raise ValueError(f"threshold must be in [0, 1], got {thr}")
    pred = scored.scores >= thr
    y = scored.labels == 1
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    tn = int(np.sum(~pred & ~y))
    fn = int(np.sum(~pred & y))
    degenerate = (tp + fp) == 0
    return MetricRow(
        threshold=float(thr),
        accuracy=(tp + tn) / len(scored.labels),
        precision=1.0 if degenerate else tp / (tp + fp),
        recall=tp / (tp + fn) if (tp + fn) else 0.0,
        fpr=fp / (fp + tn) if (fp + tn) else 0.0,
        no_positive_predictions=degenerate,
    )


def _criterion_value(row, criterion):
    if criterion == "youden":
        return row.recall - row.fpr
    if criterion == "accuracy":
        return row.accuracy
    if criterion == "f1":
        if row.no_positive_predictions or (row.precision + row.recall) == 0:
            return 0.0
        return 2 * row.precision * row.recall / (row.precision + row.recall)
    raise ValueError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")


def best_threshold(scored, criterion="youden"):
    """Scan distinct score values for the best row under the criterion; ties
    go to the higher threshold (fewer positive calls)."""
    best = None
    best_value = -np.inf
    for thr in np.unique(scored.scores)[::-1]:
        row = threshold_metrics(scored, float(thr))
        value = _criterion_value(row, criterion)
        if value > best_value:
            best, best_value = row, value
    return best.threshold, best


def top_k_false_positives(scored, k):
    """Count label-0 samples among the k highest scores: (selected, FP).

    Score ties at the cut are resolved by stable input order.
    """
    n = len(scored.scores)
    if not 0 <= k <= n:
        raise ValueError(f"k must be in [0, {n}], got {k}")
    order = np.argsort(-scored.scores, kind="stable")[:k]
    return k, int(np.sum(scored.labels[order] == 0))


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvaluationReport:
    rows: dict = field(default_factory=dict)  # row name -> per-attribute results
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        out = {"metadata": self.metadata, "attributes": {}}
        for name, row in self.rows.items():
            out["attributes"][name] = {
                "auc": row["auc"],
                "criterion": row["criterion"],
                "best": row["best"].to_dict(),
                "roc": [[f, t, thr] for f, t, thr in row["roc"]],
                "test_samples": row["test_samples"],
            }
        return out


def render_metric_row(row):
    """One table line in `THR, Acc., Prec., Rec., FPR` order."""
    return (
        f"{row.threshold:g}, {row.accuracy:.4f}, {row.precision:.4f}, "
        f"{row.recall:.4f}, {row.fpr:.4f}"
    )


def render_table(report):
    lines = ["Attribute | THR | Acc. | Prec. | Rec. | FPR | AUC"]
    for name, row in report.rows.items():
        b = row["best"]
        flag = " *no positive predictions" if b.no_positive_predictions else ""
        lines.append(
            f"{name} | {b.threshold:g} | {b.accuracy:.4f} | {b.precision:.4f} | "
            f"{b.recall:.4f} | {b.fpr:.4f} | {row['auc']:.4f}{flag}"
        )
    return "\n".join(lines) + "\n"


def write_roc_csv(table, path):
    with open(path, "w") as f:
        f.write("fpr,tpr,threshold\n")
        for fpr, tpr, thr in table:
            f.write(f"{fpr!r},{tpr!r},{thr!r}\n")


def evaluate_scored(scored, criterion="youden"):
    table = roc_table(scored)
    thr, best = best_threshold(scored, criterion)
    return {
        "auc": auc([(f, t) for f, t, _ in table]),
        "roc": table,
        "best": best,
        "criterion": criterion,
        "test_samples": len(scored.scores),
    }


def evaluate_model(model, datasets, criterion="youden"):
    """Score a composite model's attributes on their test splits.

    Binary attributes use class 1 as the positive class; 3-class attributes
    produce one one-vs-rest row per class, named ``attribute:class``.
    """
    report = EvaluationReport(
        metadata={
            "trunk_fingerprint": model.trunk.fingerprint,
            "branch_trunk_fingerprints": {a: model.branches[a].trunk_fingerprint for a in model.attributes},
            "dataset_digests": {sd.attribute: sd.digest for sd in datasets},
            "criterion": criterion,
        }
    )
    by_attr = {sd.attribute: sd for sd in datasets}
    for attr in model.attributes:
        sd = by_attr.get(attr)
        if sd is None or len(sd.y_test) == 0:
            continue
        probs = model.infer_batch(sd.x_test, [attr])[attr]
        k = probs.shape[1]
        targets = [(attr, 1)] if k == 2 else [(f"{attr}:{name}", i) for i, name in enumerate(sd.class_names)]
        for row_name, cls in targets:
            scored = ScoredSet(
                scores=np.clip(probs[:, cls].astype(np.float64), 0.0, 1.0),
                labels=(sd.y_test == cls).astype(np.int64),
                attribute=row_name,
            )
            report.rows[row_name] = evaluate_scored(scored, criterion)
    return report


def write_report_json(report, path):
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")
