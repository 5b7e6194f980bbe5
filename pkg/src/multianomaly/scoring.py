"""Per-category scores and anchor-thresholded predictions over kept prompts.

``score_category`` is the best cosine similarity between an image and the
category's kept prompts.  ``predict_binary`` fires only when even the *least*
similar kept prompt beats the image's similarity to the anchor (strictly).
"""

from __future__ import annotations

import csv
import io

import numpy as np

from .alignloss import PromptBank
from .numcore import as_matrix, cosine_similarity
from .selection import SelectionResult

__all__ = [
    "score_category",
    "score_vector",
    "predict_binary",
    "predict_vector",
    "anomaly_score",
    "score_matrix",
    "predict_matrix",
    "anomaly_scores",
    "write_score_table",
    "read_score_table",
]


def _sims(f_img, prompts: np.ndarray) -> np.ndarray:
    return np.array([cosine_similarity(f_img, p) for p in prompts])


def score_category(f_img, category: str, bank: PromptBank, sel: SelectionResult) -> float:
    return float(_sims(f_img, sel.kept_prompts(bank, category)).max())


def score_vector(f_img, bank: PromptBank, sel: SelectionResult) -> np.ndarray:
    return np.array([score_category(f_img, c, bank, sel) for c in bank.categories])


def predict_binary(f_img, category: str, bank: PromptBank, sel: SelectionResult,
                   reduce: str = "min") -> int:
    """1 iff the kept-prompt similarity (min by default) exceeds the anchor similarity.

    ``reduce="max"`` is a diagnostic variant only.
    """
    sims = _sims(f_img, sel.kept_prompts(bank, category))
    if reduce == "min":
        evidence = sims.min()
    elif reduce == "max":
        evidence = sims.max()
    else:
        raise ValueError(f"reduce must be 'min' or 'max', got {reduce!r}")
    return int(evidence > cosine_similarity(f_img, bank.anchor))


def predict_vector(f_img, bank: PromptBank, sel: SelectionResult, reduce: str = "min") -> np.ndarray:
    return np.array([predict_binary(f_img, c, bank, sel, reduce) for c in bank.categories], dtype=np.int64)


def anomaly_score(f_img, bank: PromptBank, sel: SelectionResult) -> float:
    """Best category score minus similarity to the anchor."""
    return float(score_vector(f_img, bank, sel).max() - cosine_similarity(f_img, bank.anchor))


# Batch forms.  Row i of the output is exactly the single-image result for
# row i of ``features``.

def score_matrix(features, bank: PromptBank, sel: SelectionResult) -> np.ndarray:
    features = as_matrix(features, "features")
    return np.vstack([score_vector(f, bank, sel) for f in features])


def predict_matrix(features, bank: PromptBank, sel: SelectionResult, reduce: str = "min") -> np.ndarray:
    features = as_matrix(features, "features")
    return np.vstack([predict_vector(f, bank, sel, reduce) for f in features])


def anomaly_scores(features, bank: PromptBank, sel: SelectionResult) -> np.ndarray:
    features = as_matrix(features, "features")
    return np.array([anomaly_score(f, bank, sel) for f in features])


# -- score table --------------------------------------------------------------
#
# Tab-separated, one header line then one row per image:
#   image_id  score:<cat>...  pred:<cat>...  anomaly_score
# Reals are written with repr() so reading them back is exact.

def write_score_table(image_ids, categories, scores, preds, anomaly) -> str:
    categories = list(categories)
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["image_id"] + [f"score:{c}" for c in categories]
               + [f"pred:{c}" for c in categories] + ["anomaly_score"])
    for i, image_id in enumerate(image_ids):
        w.writerow([image_id] + [repr(float(s)) for s in scores[i]]
                   + [str(int(p)) for p in preds[i]] + [repr(float(anomaly[i]))])
    return buf.getvalue()


def read_score_table(text: str):
    """Inverse of :func:`write_score_table` -> (ids, categories, scores, preds, anomaly)."""
    rows = list(csv.reader(io.StringIO(text), delimiter="\t"))
    if not rows:
        raise ValueError("empty score table")
    header = rows[0]
    if header[0] != "image_id" or header[-1] != "anomaly_score" or (len(header) - 2) % 2:
        raise ValueError("malformed score table header")
    d = (len(header) - 2) // 2
    categories = [h.split(":", 1)[1] for h in header[1:1 + d]]
    if [h.split(":", 1)[1] for h in header[1 + d:1 + 2 * d]] != categories:
        raise ValueError("score and prediction columns disagree on categories")
    ids, scores, preds, anomaly = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValueError(f"score table line {lineno}: expected {len(header)} fields, got {len(row)}")
        ids.append(row[0])
        scores.append([float(x) for x in row[1:1 + d]])
        preds.append([int(x) for x in row[1 + d:1 + 2 * d]])
        anomaly.append(float(row[-1]))
    return (ids, categories, np.array(scores).reshape(-1, d),
            np.array(preds, dtype=np.int64).reshape(-1, d), np.array(anomaly))
