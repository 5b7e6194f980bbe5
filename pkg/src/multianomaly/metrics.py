"""Evaluation: image-level AUROC, category-wise AUROC, Hamming score, subset accuracy."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "SingleClassWarning",
    "EvalReport",
    "auroc",
    "category_wise_auroc",
    "hamming_score",
    "subset_accuracy",
    "evaluate",
]


class SingleClassWarning(UserWarning):
    """A label column has only one class, so its AUROC is undefined."""


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with ties counted one half, via mid-ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise ValueError("scores and labels must be 1-D arrays of equal length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative label")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    pairs = n_pos * n_neg
    # u and pairs - u are exact (integers or halves); dividing the smaller one
    # and subtracting from 1 makes auroc(s, y) + auroc(s, 1 - y) == 1 exactly.
    if 2.0 * u <= pairs:
        return float(u / pairs)
    return float(1.0 - (pairs - u) / pairs)


def _bits(m, name):
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    return m.astype(bool)


def category_wise_auroc(score_matrix, label_matrix, categories=None):
    """Column-wise AUROC.  Single-class columns are skipped with a warning.

    Returns ``(per_category, mean)``; skipped columns map to ``None`` and are
    left out of the mean (``nan`` if nothing is evaluable).
    """
    scores = np.asarray(score_matrix, dtype=np.float64)
    labels = _bits(label_matrix, "label_matrix")
    if scores.shape != labels.shape:
        raise ValueError(f"shape mismatch: {scores.shape} vs {labels.shape}")
    if categories is None:
        categories = [str(j) for j in range(scores.shape[1])]
    per = {}
    for j, c in enumerate(categories):
        col = labels[:, j]
        if col.all() or not col.any():
            warnings.warn(f"category {c!r} has a single class in the labels; AUROC skipped",
                          SingleClassWarning, stacklevel=2)
            per[c] = None
            continue
        per[c] = auroc(scores[:, j], col.astype(int))
    vals = [v for v in per.values() if v is not None]
    mean = float(np.mean(vals)) if vals else float("nan")
    return per, mean


def _pair(pred_matrix, label_matrix):
    pred = _bits(pred_matrix, "pred_matrix")
    true = _bits(label_matrix, "label_matrix")
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    if pred.shape[0] == 0 or pred.shape[1] == 0:
        raise ValueError("need at least one sample and one category")
    return pred, true


def hamming_score(pred_matrix, label_matrix, variant: str = "cellwise") -> float:
    """Multi-label agreement.

    ``cellwise`` (default) is the fraction of matching cells, i.e. one minus
    the Hamming loss.  ``iou`` is the per-sample |pred & true| / |pred | true|
    averaged over samples, with empty-vs-empty counted as 1.
    """
    pred, true = _pair(pred_matrix, label_matrix)
    if variant == "cellwise":
        return float(np.mean(pred == true))
    if variant == "iou":
        inter = np.sum(pred & true, axis=1)
        union = np.sum(pred | true, axis=1)
        per = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
        return float(per.mean())
    raise ValueError(f"unknown Hamming variant {variant!r}")


def subset_accuracy(pred_matrix, label_matrix) -> float:
    pred, true = _pair(pred_matrix, label_matrix)
    return float(np.mean(np.all(pred == true, axis=1)))


@dataclass
class EvalReport:
    categories: list[str]
    category_auroc: dict[str, float | None]
    mean_category_auroc: float
    hamming: float
    subset_accuracy: float
    hamming_iou: float
    image_auroc: float | None = None
    counts: dict[str, dict[str, int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Nested by protocol name."""
        d = asdict(self)
        return {
            "image_level": {"auroc": d["image_auroc"]},
            "category_wise": {"per_category": d["category_auroc"], "mean": d["mean_category_auroc"]},
            "multi_label": {
                "hamming": d["hamming"],
                "subset_accuracy": d["subset_accuracy"],
                "hamming_iou": d["hamming_iou"],
            },
            "counts": d["counts"],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        per = d["category_wise"]["per_category"]
        return cls(
            categories=list(per),
            category_auroc=per,
            mean_category_auroc=d["category_wise"]["mean"],
            hamming=d["multi_label"]["hamming"],
            subset_accuracy=d["multi_label"]["subset_accuracy"],
            hamming_iou=d["multi_label"]["hamming_iou"],
            image_auroc=d["image_level"]["auroc"],
            counts=d.get("counts", {}),
        )

    def format_table(self) -> str:
        lines = [f"{'protocol':<28}{'value':>10}"]

        def fmt(v):
            return "   skipped" if v is None else f"{v:>10.4f}"

        lines.append(f"{'image AUROC':<28}{fmt(self.image_auroc)}")
        for c in self.categories:
            lines.append(f"{'AUROC[' + c + ']':<28}{fmt(self.category_auroc[c])}")
        lines.append(f"{'mean category AUROC':<28}{fmt(self.mean_category_auroc)}")
        lines.append(f"{'Hamming score':<28}{fmt(self.hamming)}")
        lines.append(f"{'subset accuracy':<28}{fmt(self.subset_accuracy)}")
        lines.append(f"{'Hamming (IoU variant)':<28}{fmt(self.hamming_iou)}")
        return "\n".join(lines)


def evaluate(scores, preds, labels, categories, anomaly=None) -> EvalReport:
    """All protocols over one labeled test set.

    ``anomaly`` (one score per image) enables image-level AUROC against
    "any category present"; it is skipped when the set has no normal images
    or no anomalous ones.
    """
    labels = _bits(labels, "labels")
    categories = list(categories)
    per, mean = category_wise_auroc(scores, labels, categories)
    image = None
    if anomaly is not None:
        any_pos = labels.any(axis=1)
        if any_pos.all() or not any_pos.any():
            warnings.warn("test set lacks normal or anomalous images; image AUROC skipped",
                          SingleClassWarning, stacklevel=2)
        else:
            image = auroc(anomaly, any_pos.astype(int))
    counts = {
        c: {"positives": int(labels[:, j].sum()), "negatives": int((~labels[:, j]).sum())}
        for j, c in enumerate(categories)
    }
    return EvalReport(
        categories=categories,
        category_auroc=per,
        mean_category_auroc=mean,
        hamming=hamming_score(preds, labels),
        subset_accuracy=subset_accuracy(preds, labels),
        hamming_iou=hamming_score(preds, labels, variant="iou"),
        image_auroc=image,
        counts=counts,
    )
