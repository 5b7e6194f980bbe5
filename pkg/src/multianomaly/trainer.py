"""Full-batch few-shot training of the image and text adapters.

Every epoch re-encodes the training inputs (image branch) and all prompt
inputs plus the anchor (text branch), evaluates the summed alignment and
anchor losses, back-propagates into both branches' adapters and takes one
optimizer step.  Frozen layers never change.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .alignloss import LossBreakdown, PromptBank, loss_grad, margin_check
from .encoder import EncoderModel, encode_backward, encode_batch
from .numcore import as_matrix, as_vector

__all__ = [
    "NumericError",
    "FewShotDataset",
    "PromptInputs",
    "TrainConfig",
    "EpochRecord",
    "TrainReport",
    "OptimizerState",
    "encode_prompts",
    "compute_gradients",
    "step",
    "train",
]

log = logging.getLogger(__name__)

OPTIMIZERS = ("gd", "momentum")


class NumericError(ArithmeticError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class FewShotDataset:
    """Raw (pre-backbone) input vectors with multi-hot labels."""

    inputs: np.ndarray
    labels: np.ndarray
    categories: tuple[str, ...]
    ids: list[str] | None = None

    def __post_init__(self):
        self.categories = tuple(self.categories)
        inputs = np.asarray(self.inputs, dtype=np.float64)
        if inputs.ndim != 2 or not np.all(np.isfinite(inputs)):
            raise ValueError("inputs must be a finite 2-D array")
        self.inputs = inputs
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.shape != (len(self.inputs), len(self.categories)):
            raise ValueError(
                f"labels must have shape ({len(self.inputs)}, {len(self.categories)}), got {labels.shape}"
            )
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be 0/1")
        self.labels = labels.astype(np.int64)
        if self.ids is None:
            self.ids = [f"sample-{i:04d}" for i in range(len(self.inputs))]
        elif len(self.ids) != len(self.inputs):
            raise ValueError("ids must match the number of samples")

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass
class PromptInputs:
    """Raw prompt vectors per category plus the raw normal (anchor) prompt."""

    categories: tuple[str, ...]
    prompts: dict[str, np.ndarray]
    anchor: np.ndarray
    texts: dict[str, list[str]] = field(default_factory=dict)
    anchor_text: str = "normal"

    def __post_init__(self):
        self.categories = tuple(self.categories)
        if set(self.prompts) != set(self.categories):
            raise ValueError("prompt dict keys must match the category list")
        self.anchor = as_vector(self.anchor, "anchor")
        self.prompts = {c: as_matrix(self.prompts[c], f"prompts[{c!r}]") for c in self.categories}
        for c in self.categories:
            if self.prompts[c].shape[1] != self.anchor.shape[0]:
                raise ValueError(f"category {c!r} prompt dim does not match the anchor")
            self.texts.setdefault(c, [f"{c} sign {i}" for i in range(len(self.prompts[c]))])

    def stacked(self) -> np.ndarray:
        """Prompts in category order, anchor as the last row."""
        return np.vstack([self.prompts[c] for c in self.categories] + [self.anchor[None, :]])


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-2
    lam: float = 0.8
    seed: int = 0
    optimizer: str = "gd"
    momentum: float = 0.9
    safeguard: bool = False

    def __post_init__(self):
        if int(self.epochs) < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: LossBreakdown
    margin_rate: float


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    checkpoints: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def totals(self) -> np.ndarray:
        return np.array([r.loss.total for r in self.records])

    def to_tsv(self) -> str:
        buf = io.StringIO()
        for branch, path in sorted(self.checkpoints.items()):
            buf.write(f"# checkpoint\t{branch}\t{path}\n")
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["epoch", "l_img_text", "l_anchor", "total", "margin_rate"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.loss.l_img_text), repr(r.loss.l_anchor),
                        repr(r.loss.total), repr(r.margin_rate)])
        return buf.getvalue()

    @classmethod
    def from_tsv(cls, text: str) -> "TrainReport":
        report = cls()
        body = []
        for line in text.splitlines():
            if line.startswith("# checkpoint\t"):
                _, branch, path = line.split("\t", 2)
                report.checkpoints[branch] = path
            elif line and not line.startswith("#"):
                body.append(line)
        for row in list(csv.DictReader(body, delimiter="\t")):
            loss = LossBreakdown(float(row["l_img_text"]), float(row["l_anchor"]), float(row["total"]))
            report.records.append(EpochRecord(int(row["epoch"]), loss, float(row["margin_rate"])))
        return report


class OptimizerState:
    """Momentum buffers keyed by (branch, layer index, weight name)."""

    def __init__(self, optimizer: str = "gd", momentum: float = 0.9):
        if optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        self.optimizer = optimizer
        self.momentum = float(momentum)
        self.velocity: dict[tuple, np.ndarray] = {}


def encode_prompts(text_model: EncoderModel, prompts: PromptInputs):
    """Encode every prompt and the anchor; returns (bank, tape)."""
    feats, tape = encode_batch(text_model, prompts.stacked())
    bank_prompts = {}
    start = 0
    for c in prompts.categories:
        n = len(prompts.prompts[c])
        bank_prompts[c] = feats[start:start + n]
        start += n
    bank = PromptBank(prompts.categories, bank_prompts, feats[-1],
                      {c: list(t) for c, t in prompts.texts.items()}, prompts.anchor_text)
    return bank, tape


def _as_param_grads(grads: dict[int, tuple[np.ndarray, np.ndarray]]) -> dict[tuple[int, str], np.ndarray]:
    out = {}
    for idx, (g1, g2) in grads.items():
        out[(idx, "w1")] = g1
        out[(idx, "w2")] = g2
    return out


def compute_gradients(image_model: EncoderModel, text_model: EncoderModel,
                      dataset: FewShotDataset, prompts: PromptInputs):
    """One forward/backward pass.

    Returns ``(loss, margin_rate, grads)`` where ``grads`` maps branch name to
    per-parameter adapter gradients.
    """
    if tuple(dataset.categories) != tuple(prompts.categories):
        raise ValueError("dataset and prompt categories differ")
    feats, img_tape = encode_batch(image_model, dataset.inputs)
    bank, txt_tape = encode_prompts(text_model, prompts)
    batch = list(zip(feats, dataset.labels))
    loss, lg = loss_grad(batch, bank)

    passed = total = 0
    for f, y in batch:
        report = margin_check(f, y, bank)
        passed += sum(report.values())
        total += len(report)
    margin_rate = passed / total if total else 1.0

    g_text_out = np.vstack([lg.prompts[c] for c in prompts.categories] + [lg.anchor[None, :]])
    grads = {
        "image": _as_param_grads(encode_backward(image_model, img_tape, lg.images)),
        "text": _as_param_grads(encode_backward(text_model, txt_tape, g_text_out)),
    }
    return loss, margin_rate, grads


def step(models: dict[str, EncoderModel], grads: dict[str, dict], state: OptimizerState,
         learning_rate: float) -> None:
    """Apply one update in place: ``w -= lr * g`` (or with a momentum buffer)."""
    for branch, g in grads.items():
        for key, value in g.items():
            if not np.all(np.isfinite(value)):
                raise NumericError(f"non-finite gradient for {branch} adapter {key}")
    for branch, model in models.items():
        params = model.parameters()
        new = {}
        for key, w in params.items():
            g = grads[branch][key]
            if state.optimizer == "momentum":
                vkey = (branch,) + key
                v = state.velocity.get(vkey)
                v = g.copy() if v is None else state.momentum * v + g
                state.velocity[vkey] = v
                g = v
            new[key] = w - learning_rate * g
        model.assign(new)


def _check_finite(loss: LossBreakdown, epoch: int) -> None:
    for term in ("l_img_text", "l_anchor", "total"):
        value = getattr(loss, term)
        if not np.isfinite(value):
            raise NumericError(f"non-finite {term} ({value}) at epoch {epoch}")


def train(image_model: EncoderModel, text_model: EncoderModel, dataset: FewShotDataset,
          prompts: PromptInputs, config: TrainConfig):
    """Train copies of both models; returns ``(image_model, text_model, report)``.

    Each report record holds the loss measured at the start of its epoch,
    i.e. the loss whose gradient drives that epoch's update.  With
    ``config.safeguard`` an update that raises the total loss is undone and
    retried at half the learning rate.
    """
    if image_model.dim != text_model.dim or image_model.dim != dataset.inputs.shape[1]:
        raise ValueError("image model, text model and dataset dimensions differ")
    models = {"image": image_model.copy(lam=config.lam), "text": text_model.copy(lam=config.lam)}
    state = OptimizerState(config.optimizer, config.momentum)
    lr = config.learning_rate
    report = TrainReport()

    loss, rate, grads = compute_gradients(models["image"], models["text"], dataset, prompts)
    for epoch in range(config.epochs):
        _check_finite(loss, epoch)
        report.records.append(EpochRecord(epoch, loss, rate))
        if not config.safeguard:
            step(models, grads, state, lr)
            loss, rate, grads = compute_gradients(models["image"], models["text"], dataset, prompts)
            continue
        saved = {b: {k: w.copy() for k, w in m.parameters().items()} for b, m in models.items()}
        saved_velocity = {k: v.copy() for k, v in state.velocity.items()}
        for _ in range(60):
            step(models, grads, state, lr)
            new = compute_gradients(models["image"], models["text"], dataset, prompts)
            if new[0].total <= loss.total:
                loss, rate, grads = new
                break
            for b, m in models.items():
                m.assign(saved[b])
            state.velocity = {k: v.copy() for k, v in saved_velocity.items()}
            lr *= 0.5
            log.debug("epoch %d: loss rose, learning rate halved to %g", epoch, lr)
        else:
            # no descent found at any tried step size; keep the weights
            loss, rate, grads = compute_gradients(models["image"], models["text"], dataset, prompts)
    return models["image"], models["text"], report
