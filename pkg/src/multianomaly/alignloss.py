"""Image-text alignment loss, anchor hinge loss and their gradients.

For an image feature ``f`` with positive categories ``S`` (multi-hot label):

* alignment term: sum of cosine distances from ``f`` to every prompt of every
  category in ``S``; a normal image (empty ``S``) is pulled to the anchor.
* anchor term: ``max(0, d(f, p) - d(f, anchor))`` over positive prompts ``p``
  plus ``max(0, d(f, anchor) - d(f, n))`` over prompts ``n`` of every other
  category.

Losses are raw sums over prompts and samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import DegenerateInputError, as_matrix, as_vector, cosine_distance

__all__ = [
    "PromptBank",
    "LossBreakdown",
    "LossGradients",
    "as_label",
    "img_text_loss",
    "anchor_loss",
    "total_loss",
    "loss_grad",
    "margin_check",
]

_NORM_TOL = 1e-9


@dataclass
class PromptBank:
    """Encoded prompt features per category plus the normal-image anchor."""

    categories: tuple[str, ...]
    prompts: dict[str, np.ndarray]
    anchor: np.ndarray
    texts: dict[str, list[str]] = field(default_factory=dict)
    anchor_text: str = ""

    def __post_init__(self):
        self.categories = tuple(self.categories)
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("category names must be unique")
        if set(self.prompts) != set(self.categories):
            raise ValueError("prompt dict keys must match the category list")
        self.anchor = as_vector(self.anchor, "anchor")
        dim = self.anchor.shape[0]
        prompts = {}
        for c in self.categories:
            p = as_matrix(self.prompts[c], f"prompts[{c!r}]")
            if p.shape[1] != dim:
                raise ValueError(f"category {c!r} prompts have dim {p.shape[1]}, anchor has {dim}")
            if np.any(np.all(p == self.anchor, axis=1)):
                raise ValueError(f"anchor appears among the prompts of {c!r}")
            prompts[c] = p
        self.prompts = prompts
        for name, v in [("anchor", self.anchor[None, :])] + [(c, p) for c, p in prompts.items()]:
            if np.any(np.abs(np.linalg.norm(v, axis=1) - 1.0) > _NORM_TOL):
                raise ValueError(f"{name} features must be L2-normalised")
        for c in self.categories:
            texts = self.texts.get(c)
            if texts is None:
                self.texts[c] = [f"{c} sign {i}" for i in range(len(prompts[c]))]
            elif len(texts) != len(prompts[c]):
                raise ValueError(f"category {c!r} has {len(texts)} texts for {len(prompts[c])} prompts")

    @property
    def dim(self) -> int:
        return self.anchor.shape[0]

    def counts(self) -> list[int]:
        return [len(self.prompts[c]) for c in self.categories]

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All prompts as one matrix, and the category index of each row."""
        mats = [self.prompts[c] for c in self.categories]
        owner = np.concatenate([np.full(len(m), i) for i, m in enumerate(mats)])
        return np.vstack(mats), owner


@dataclass(frozen=True)
class LossBreakdown:
    l_img_text: float
    l_anchor: float
    total: float

    @classmethod
    def of(cls, l_img_text: float, l_anchor: float) -> "LossBreakdown":
        return cls(float(l_img_text), float(l_anchor), float(l_img_text) + float(l_anchor))


@dataclass
class LossGradients:
    images: np.ndarray
    prompts: dict[str, np.ndarray]
    anchor: np.ndarray


def as_label(label, bank: PromptBank) -> np.ndarray:
    bits = np.asarray(label)
    if bits.ndim != 1 or bits.shape[0] != len(bank.categories):
        raise ValueError(f"label must have {len(bank.categories)} entries, got shape {bits.shape}")
    if not np.all((bits == 0) | (bits == 1)):
        raise ValueError("label entries must be 0/1")
    return bits.astype(bool)


def _split(label: np.ndarray, bank: PromptBank):
    """(positive categories, negative categories) for one label."""
    pos = [c for c, b in zip(bank.categories, label) if b]
    neg = [c for c, b in zip(bank.categories, label) if not b]
    return pos, neg


def _distances(f: np.ndarray, mat: np.ndarray) -> np.ndarray:
    return np.array([cosine_distance(f, row) for row in mat])


def _check_dim(f, bank):
    f = as_vector(f, "f_img")
    if f.shape[0] != bank.dim:
        raise ValueError(f"image feature dim {f.shape[0]} does not match bank dim {bank.dim}")
    return f


def img_text_loss(f_img, label, bank: PromptBank) -> float:
    f = _check_dim(f_img, bank)
    label = as_label(label, bank)
    pos, _ = _split(label, bank)
    if not pos:
        return cosine_distance(f, bank.anchor)
    return float(sum(_distances(f, bank.prompts[c]).sum() for c in pos))


def anchor_loss(f_img, label, bank: PromptBank) -> float:
    f = _check_dim(f_img, bank)
    label = as_label(label, bank)
    pos, neg = _split(label, bank)
    d_anchor = cosine_distance(f, bank.anchor)
    total = 0.0
    for c in pos:
        total += float(np.maximum(0.0, _distances(f, bank.prompts[c]) - d_anchor).sum())
    for c in neg:
        total += float(np.maximum(0.0, d_anchor - _distances(f, bank.prompts[c])).sum())
    return total


def margin_check(f_img, label, bank: PromptBank) -> dict[str, bool]:
    """Per positive category: farthest own prompt <= anchor <= nearest foreign prompt."""
    f = _check_dim(f_img, bank)
    label = as_label(label, bank)
    pos, neg = _split(label, bank)
    d_anchor = cosine_distance(f, bank.anchor)
    nearest_foreign = min(
        (float(_distances(f, bank.prompts[c]).min()) for c in neg), default=np.inf
    )
    return {
        c: bool(_distances(f, bank.prompts[c]).max() <= d_anchor <= nearest_foreign)
        for c in pos
    }


def _as_batch(batch, bank):
    batch = list(batch)
    if not batch:
        raise ValueError("batch must be non-empty")
    feats = np.vstack([_check_dim(f, bank) for f, _ in batch])
    labels = np.vstack([as_label(lbl, bank) for _, lbl in batch])
    return feats, labels


def total_loss(batch, bank: PromptBank) -> LossBreakdown:
    """Summed alignment and anchor terms over a non-empty list of (feature, label)."""
    feats, labels = _as_batch(batch, bank)
    lit = sum(img_text_loss(f, y, bank) for f, y in zip(feats, labels))
    lan = sum(anchor_loss(f, y, bank) for f, y in zip(feats, labels))
    return LossBreakdown.of(lit, lan)


def _cos_grads(u: np.ndarray, v: np.ndarray):
    """Gradients of cosine distance d(u, v_k) w.r.t. u (rows) and v_k (rows).

    ``v`` is a matrix; returns (du: len(v) x dim, dv: len(v) x dim).
    """
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v, axis=1)
    if nu == 0.0 or np.any(nv == 0.0):
        raise DegenerateInputError("zero-norm feature in loss gradient")
    uh = u / nu
    vh = v / nv[:, None]
    c = vh @ uh
    du = -(vh - c[:, None] * uh[None, :]) / nu
    dv = -(uh[None, :] - c[:, None] * vh) / nv[:, None]
    return du, dv


def loss_grad(batch, bank: PromptBank) -> tuple[LossBreakdown, LossGradients]:
    """Loss and exact gradients w.r.t. every image feature, prompt and the anchor.

    Hinge terms contribute only when strictly positive.
    """
    feats, labels = _as_batch(batch, bank)
    g_img = np.zeros_like(feats)
    g_prompts = {c: np.zeros_like(bank.prompts[c]) for c in bank.categories}
    g_anchor = np.zeros(bank.dim)
    lit_total = 0.0
    lan_total = 0.0
    anchor_row = bank.anchor[None, :]

    for s, (f, label) in enumerate(zip(feats, labels)):
        pos, neg = _split(label, bank)
        da_u, da_v = _cos_grads(f, anchor_row)
        d_anchor = cosine_distance(f, bank.anchor)

        lit_s = 0.0
        lan_s = 0.0
        if not pos:
            lit_s += d_anchor
            g_img[s] += da_u[0]
            g_anchor += da_v[0]

        for c in pos:
            d = _distances(f, bank.prompts[c])
            du, dv = _cos_grads(f, bank.prompts[c])
            lit_s += float(d.sum())
            g_img[s] += du.sum(axis=0)
            g_prompts[c] += dv
            hinge = d - d_anchor
            active = hinge > 0.0
            lan_s += float(np.maximum(0.0, hinge).sum())
            n_act = int(active.sum())
            if n_act:
                g_img[s] += du[active].sum(axis=0) - n_act * da_u[0]
                g_prompts[c][active] += dv[active]
                g_anchor -= n_act * da_v[0]

        for c in neg:
            d = _distances(f, bank.prompts[c])
            hinge = d_anchor - d
            active = hinge > 0.0
            n_act = int(active.sum())
            if not n_act:
                continue
            lan_s += float(np.maximum(0.0, hinge).sum())
            du, dv = _cos_grads(f, bank.prompts[c])
            g_img[s] += n_act * da_u[0] - du[active].sum(axis=0)
            g_prompts[c][active] -= dv[active]
            g_anchor += n_act * da_v[0]

        lit_total += lit_s
        lan_total += lan_s

    return LossBreakdown.of(lit_total, lan_total), LossGradients(g_img, g_prompts, g_anchor)
