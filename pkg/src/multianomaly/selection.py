"""Inference-time sign selection.

Each prompt is compared against its own category and against every other
category.  ``d_inf`` is the distance to the nearest *other* prompt of its own
category; ``delta`` is the distance to the nearest prompt of any other
category.  A prompt is kept iff ``d_inf < delta`` (strict; ties discard).

Two policies keep every category usable by the scorer:

* a single-prompt category keeps its prompt (its ``d_inf`` is +inf);
* a category whose prompts are all discarded falls back to keeping all of
  them, with ``fallback_used`` set.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .alignloss import PromptBank
from .numcore import pairwise_cosine_distance

__all__ = [
    "CategorySelection",
    "SelectionResult",
    "d_inf",
    "delta",
    "select",
    "keep_all",
]


@dataclass(frozen=True)
class CategorySelection:
    kept: tuple[int, ...]
    discarded: tuple[int, ...]
    d_inf: np.ndarray
    delta: np.ndarray
    fallback_used: bool = False
    single_prompt: bool = False


@dataclass
class SelectionResult:
    categories: dict[str, CategorySelection]
    enabled: bool = True

    def kept_prompts(self, bank: PromptBank, category: str) -> np.ndarray:
        return bank.prompts[category][list(self.categories[category].kept)]

    def to_rows(self, bank: PromptBank) -> list[dict]:
        rows = []
        for c in bank.categories:
            sel = self.categories[c]
            kept = set(sel.kept)
            for i in range(len(bank.prompts[c])):
                rows.append({
                    "category": c,
                    "index": i,
                    "text": bank.texts[c][i],
                    "d_inf": float(sel.d_inf[i]),
                    "delta": float(sel.delta[i]),
                    "status": "kept" if i in kept else "discarded",
                    "fallback": int(sel.fallback_used),
                })
        return rows

    def to_tsv(self, bank: PromptBank) -> str:
        """Audit report, one row per prompt; floats written with ``repr``."""
        buf = io.StringIO()
        fields = ["category", "index", "text", "d_inf", "delta", "status", "fallback"]
        writer = csv.DictWriter(buf, fieldnames=fields, delimiter="\t", lineterminator="\n")
        writer.writeheader()
        for row in self.to_rows(bank):
            row["d_inf"] = repr(row["d_inf"])
            row["delta"] = repr(row["delta"])
            writer.writerow(row)
        return buf.getvalue()


def _lookup(bank: PromptBank, category: str, index: int) -> np.ndarray:
    if category not in bank.prompts:
        raise KeyError(f"unknown category {category!r}")
    prompts = bank.prompts[category]
    if not 0 <= index < len(prompts):
        raise IndexError(f"category {category!r} has no prompt {index}")
    return prompts[index]


def d_inf(bank: PromptBank, category: str, index: int) -> float:
    """Distance from prompt ``index`` of ``category`` to its nearest sibling."""
    f = _lookup(bank, category, index)
    others = np.delete(bank.prompts[category], index, axis=0)
    if len(others) == 0:
        return float("inf")
    return float(pairwise_cosine_distance(f[None, :], others).min())


def _competitors(bank: PromptBank, category: str, include_anchor: bool) -> np.ndarray:
    mats = [bank.prompts[k] for k in bank.categories if k != category]
    if include_anchor:
        mats.append(bank.anchor[None, :])
    return np.vstack(mats)


def delta(bank: PromptBank, category: str, index: int, include_anchor: bool = False) -> float:
    """Distance from prompt ``index`` of ``category`` to the nearest foreign prompt."""
    if len(bank.categories) < 2:
        raise ValueError("delta needs at least two categories")
    f = _lookup(bank, category, index)
    return float(pairwise_cosine_distance(f[None, :], _competitors(bank, category, include_anchor)).min())


def select(bank: PromptBank, include_anchor: bool = False) -> SelectionResult:
    """Keep prompts that sit closer to their own category than to any other.

    With ``include_anchor`` the anchor competes as a pseudo-category when
    computing ``delta``; it is never itself a candidate.
    """
    if len(bank.categories) < 2:
        raise ValueError("sign selection needs at least two categories")
    result = {}
    for c in bank.categories:
        prompts = bank.prompts[c]
        n = len(prompts)
        own = pairwise_cosine_distance(prompts, prompts)
        np.fill_diagonal(own, np.inf)
        dinf = own.min(axis=1)
        dlt = pairwise_cosine_distance(prompts, _competitors(bank, c, include_anchor)).min(axis=1)
        if n == 1:
            result[c] = CategorySelection((0,), (), dinf, dlt, single_prompt=True)
            continue
        keep = dinf < dlt
        if not keep.any():
            result[c] = CategorySelection(tuple(range(n)), (), dinf, dlt, fallback_used=True)
            continue
        result[c] = CategorySelection(
            tuple(int(i) for i in np.flatnonzero(keep)),
            tuple(int(i) for i in np.flatnonzero(~keep)),
            dinf,
            dlt,
        )
    return SelectionResult(result)


def keep_all(bank: PromptBank) -> SelectionResult:
    """Selection disabled: every prompt kept.  Diagnostics are still filled in."""
    if len(bank.categories) < 2:
        return SelectionResult(
            {c: CategorySelection(tuple(range(len(bank.prompts[c]))), (),
                                  np.full(len(bank.prompts[c]), np.nan),
                                  np.full(len(bank.prompts[c]), np.nan))
             for c in bank.categories},
            enabled=False,
        )
    full = select(bank)
    return SelectionResult(
        {c: CategorySelection(tuple(range(len(bank.prompts[c]))), (), s.d_inf, s.delta)
         for c, s in full.categories.items()},
        enabled=False,
    )
