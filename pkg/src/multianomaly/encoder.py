"""Frozen linear backbone with trainable shift adapters.

A backbone layer maps ``h -> act(W h)`` with fixed ``W``.  At an adapter site
the frozen output ``a`` is passed through a rectified bottleneck and blended
back in::

    ada = relu(W2 relu(W1 a))
    out = lam * a + (1 - lam) * ada

The last layer's output is L2-normalised.  Forward passes work on batches
(rows are samples); :func:`encode_backward` returns gradients for adapter
weights only, summed over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _binio
from ._binio import FormatError, FormatErrorCode
from .numcore import DegenerateInputError, RngState, as_matrix, as_vector, sample_gaussian

__all__ = [
    "FrozenLayer",
    "ShiftAdapter",
    "EncoderModel",
    "ForwardTape",
    "StaleTapeError",
    "adapter_forward",
    "blend",
    "encode",
    "encode_batch",
    "encode_backward",
    "random_backbone",
    "build_encoder",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "checkpoint_from_bytes",
]

CHECKPOINT_VERSION = 1
BRANCH_TAGS = {"image": 0, "text": 1}


class StaleTapeError(RuntimeError):
    """The model changed after the tape was recorded."""


@dataclass(frozen=True)
class FrozenLayer:
    weight: np.ndarray
    apply_activation: bool = False

    def __post_init__(self):
        w = np.array(as_matrix(self.weight, "frozen weight"), copy=True)
        if w.shape[0] != w.shape[1]:
            raise ValueError(f"frozen layer must be square, got {w.shape}")
        w.setflags(write=False)
        object.__setattr__(self, "weight", w)

    @property
    def dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class ShiftAdapter:
    w1: np.ndarray  # hidden x dim
    w2: np.ndarray  # dim x hidden
    layer_index: int

    def __post_init__(self):
        self.w1 = np.array(as_matrix(self.w1, "w1"), copy=True)
        self.w2 = np.array(as_matrix(self.w2, "w2"), copy=True)
        if self.w1.shape[0] != self.w2.shape[1] or self.w1.shape[1] != self.w2.shape[0]:
            raise ValueError(
                f"adapter shapes do not chain: w1 {self.w1.shape}, w2 {self.w2.shape}"
            )

    @property
    def dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return lam


class EncoderModel:
    """Ordered frozen layers plus adapters keyed by layer index."""

    def __init__(self, layers, adapters=(), lam: float = 0.8, branch: str = "image"):
        self.layers = tuple(layers)
        if not self.layers:
            raise ValueError("backbone needs at least one layer")
        dim = self.layers[0].dim
        if any(layer.dim != dim for layer in self.layers):
            raise ValueError("all backbone layers must share one dimension")
        if branch not in BRANCH_TAGS:
            raise ValueError(f"branch must be one of {sorted(BRANCH_TAGS)}, got {branch!r}")
        self.branch = branch
        self.lam = _check_lambda(lam)
        self.adapters: dict[int, ShiftAdapter] = {}
        for adapter in adapters:
            if adapter.layer_index in self.adapters:
                raise ValueError(f"duplicate adapter at layer {adapter.layer_index}")
            if not 0 <= adapter.layer_index < len(self.layers):
                raise ValueError(f"adapter layer {adapter.layer_index} outside backbone depth")
            if adapter.dim != dim:
                raise ValueError(f"adapter at layer {adapter.layer_index} has dim {adapter.dim}, expected {dim}")
            self.adapters[adapter.layer_index] = adapter
        self.adapters = dict(sorted(self.adapters.items()))
        self.version = 0

    @property
    def dim(self) -> int:
        return self.layers[0].dim

    @property
    def depth(self) -> int:
        return len(self.layers)

    def __repr__(self) -> str:
        return (
            f"EncoderModel(branch={self.branch!r}, depth={self.depth}, dim={self.dim}, "
            f"lam={self.lam}, adapters={list(self.adapters)})"
        )

    def copy(self, lam: float | None = None) -> "EncoderModel":
        """Deep copy of the adapters; frozen layers are shared (they are read-only)."""
        adapters = [ShiftAdapter(a.w1, a.w2, a.layer_index) for a in self.adapters.values()]
        return EncoderModel(self.layers, adapters, self.lam if lam is None else lam, self.branch)

    def parameters(self) -> dict[tuple[int, str], np.ndarray]:
        out = {}
        for idx, a in self.adapters.items():
            out[(idx, "w1")] = a.w1
            out[(idx, "w2")] = a.w2
        return out

    def assign(self, params: dict[tuple[int, str], np.ndarray]) -> None:
        """Overwrite adapter weights; invalidates any outstanding tapes."""
        for (idx, name), value in params.items():
            adapter = self.adapters[idx]
            current = getattr(adapter, name)
            value = np.asarray(value, dtype=np.float64)
            if value.shape != current.shape:
                raise ValueError(f"shape mismatch for {(idx, name)}: {value.shape} vs {current.shape}")
            setattr(adapter, name, value.copy())
        self.version += 1


def _relu(x):
    return np.maximum(x, 0.0)


def adapter_forward(adapter: ShiftAdapter, f_in) -> np.ndarray:
    """``relu(W2 relu(W1 f_in))`` for a single vector or a batch of rows."""
    f_in = np.asarray(f_in, dtype=np.float64)
    if f_in.shape[-1] != adapter.dim:
        raise ValueError(f"adapter expects dim {adapter.dim}, got {f_in.shape[-1]}")
    return _relu(_relu(f_in @ adapter.w1.T) @ adapter.w2.T)


def blend(f_frozen, f_ada, lam: float) -> np.ndarray:
    lam = _check_lambda(lam)
    f_frozen = np.asarray(f_frozen, dtype=np.float64)
    f_ada = np.asarray(f_ada, dtype=np.float64)
    if f_frozen.shape != f_ada.shape:
        raise ValueError(f"shape mismatch: {f_frozen.shape} vs {f_ada.shape}")
    return lam * f_frozen + (1.0 - lam) * f_ada


@dataclass
class _LayerRecord:
    h: np.ndarray
    z: np.ndarray
    a: np.ndarray
    u1: np.ndarray | None = None
    r1: np.ndarray | None = None
    u2: np.ndarray | None = None


@dataclass
class ForwardTape:
    """Everything :func:`encode_backward` needs, tied to one model version."""

    model_id: int
    model_version: int
    single: bool
    records: list[_LayerRecord] = field(default_factory=list)
    pre_norm: np.ndarray | None = None
    norms: np.ndarray | None = None
    output: np.ndarray | None = None


def encode_batch(model: EncoderModel, inputs) -> tuple[np.ndarray, ForwardTape]:
    """Encode each row of ``inputs``; returns unit-norm rows and the tape."""
    x = as_matrix(inputs, "inputs")
    if x.shape[1] != model.dim:
        raise ValueError(f"model expects dim {model.dim}, got {x.shape[1]}")
    tape = ForwardTape(id(model), model.version, single=False)
    h = x
    for i, layer in enumerate(model.layers):
        z = h @ layer.weight.T
        a = _relu(z) if layer.apply_activation else z
        rec = _LayerRecord(h=h, z=z, a=a)
        adapter = model.adapters.get(i)
        if adapter is not None:
            rec.u1 = a @ adapter.w1.T
            rec.r1 = _relu(rec.u1)
            rec.u2 = rec.r1 @ adapter.w2.T
            out = blend(a, _relu(rec.u2), model.lam)
        else:
            out = a
        tape.records.append(rec)
        h = out
    norms = np.linalg.norm(h, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("encoder produced a zero vector")
    y = h / norms[:, None]
    tape.pre_norm = h
    tape.norms = norms
    tape.output = y
    return y, tape


def encode(model: EncoderModel, x) -> tuple[np.ndarray, ForwardTape]:
    """Single-vector form of :func:`encode_batch`."""
    x = as_vector(x, "input")
    y, tape = encode_batch(model, x[None, :])
    tape.single = True
    return y[0], tape


def encode_backward(model: EncoderModel, tape: ForwardTape, grad_out) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Gradient of ``sum(grad_out * output)`` w.r.t. every adapter's (w1, w2).

    Rectifier subgradient is 0 at 0.  Frozen weights get no gradient.
    """
    if tape.model_id != id(model) or tape.model_version != model.version:
        raise StaleTapeError("tape was recorded on a different model state")
    g = np.asarray(grad_out, dtype=np.float64)
    if tape.single:
        g = g[None, :]
    if g.shape != tape.output.shape:
        raise ValueError(f"grad_out shape {g.shape} does not match output {tape.output.shape}")

    y = tape.output
    # d(v/|v|) = (g - y (y.g)) / |v|
    g = (g - y * np.sum(y * g, axis=1, keepdims=True)) / tape.norms[:, None]

    grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for i in range(model.depth - 1, -1, -1):
        layer = model.layers[i]
        rec = tape.records[i]
        adapter = model.adapters.get(i)
        if adapter is not None:
            g_u2 = (1.0 - model.lam) * g * (rec.u2 > 0.0)
            g_w2 = g_u2.T @ rec.r1
            g_u1 = (g_u2 @ adapter.w2) * (rec.u1 > 0.0)
            g_w1 = g_u1.T @ rec.a
            grads[i] = (g_w1, g_w2)
            g = model.lam * g + g_u1 @ adapter.w1
        if layer.apply_activation:
            g = g * (rec.z > 0.0)
        g = g @ layer.weight
    return dict(sorted(grads.items()))


def _householder_product(dim: int, rng: RngState, reflections: int = 3) -> np.ndarray:
    w = np.eye(dim)
    for _ in range(reflections):
        v = sample_gaussian(rng, dim, 1.0)
        w = w - 2.0 * np.outer(w @ v, v) / float(v @ v)
    return w


def random_backbone(dim: int, depth: int, rng: RngState, kind: str = "orthogonal",
                    apply_activation: bool = False) -> list[FrozenLayer]:
    """Frozen layers drawn from ``rng``.

    ``orthogonal`` layers (products of Householder reflections) preserve cosine
    geometry, which keeps an untrained image/text pair sharing one backbone
    aligned.  ``gaussian`` layers are N(0, 1/dim) and only useful for tests.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    layers = []
    for _ in range(depth):
        if kind == "orthogonal":
            w = _householder_product(dim, rng)
        elif kind == "gaussian":
            w = sample_gaussian(rng, dim * dim, 1.0 / math.sqrt(dim)).reshape(dim, dim)
        else:
            raise ValueError(f"unknown backbone kind {kind!r}")
        layers.append(FrozenLayer(w, apply_activation))
    return layers


def build_encoder(layers, branch: str, rng: RngState, adapter_layers=None, hidden: int | None = None,
                  lam: float = 0.8, init_scale: float = 0.01) -> EncoderModel:
    """Attach N(0, init_scale**2) adapters to a frozen backbone.

    By default the image branch gets an adapter on every layer and the text
    branch only on the last one.  ``hidden`` defaults to ``ceil(dim / 4)``.
    """
    layers = list(layers)
    dim = layers[0].dim
    if adapter_layers is None:
        adapter_layers = range(len(layers)) if branch == "image" else [len(layers) - 1]
    if hidden is None:
        hidden = max(1, math.ceil(dim / 4))
    adapters = []
    for idx in adapter_layers:
        w1 = sample_gaussian(rng, hidden * dim, init_scale).reshape(hidden, dim)
        w2 = sample_gaussian(rng, dim * hidden, init_scale).reshape(dim, hidden)
        adapters.append(ShiftAdapter(w1, w2, int(idx)))
    return EncoderModel(layers, adapters, lam, branch)


# -- checkpoint format ------------------------------------------------------
#
#   "SDMA" | u32 version | u32 branch tag | u32 depth | u32 dim | f64 lambda
#   depth x { u32 apply_activation | dim*dim f64 weight }
#   u32 n_adapters
#   n_adapters x { u32 layer_index | u32 hidden | hidden*dim f64 w1 | dim*hidden f64 w2 }
#
# Integers are unsigned 32-bit and every real is a 64-bit float, all
# little-endian.  Matrices are row-major.

def checkpoint_bytes(model: EncoderModel) -> bytes:
    parts = [
        _binio.MAGIC,
        _binio.pack_u32(CHECKPOINT_VERSION),
        _binio.pack_u32(BRANCH_TAGS[model.branch]),
        _binio.pack_u32(model.depth),
        _binio.pack_u32(model.dim),
        _binio.pack_f64(model.lam),
    ]
    for layer in model.layers:
        parts.append(_binio.pack_u32(int(layer.apply_activation)))
        parts.append(_binio.pack_f64_array(layer.weight))
    parts.append(_binio.pack_u32(len(model.adapters)))
    for idx, adapter in model.adapters.items():
        parts += [
            _binio.pack_u32(idx),
            _binio.pack_u32(adapter.hidden),
            _binio.pack_f64_array(adapter.w1),
            _binio.pack_f64_array(adapter.w2),
        ]
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes, source: str = "<checkpoint>") -> EncoderModel:
    r = _binio.Reader(data, source)
    r.expect_magic()
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(FormatErrorCode.BAD_VERSION, f"{source}: unsupported checkpoint version {version}")
    tag = r.u32()
    branches = {v: k for k, v in BRANCH_TAGS.items()}
    if tag not in branches:
        raise FormatError(FormatErrorCode.BAD_FIELD, f"{source}: unknown branch tag {tag}")
    depth, dim = r.u32(), r.u32()
    if depth == 0 or dim == 0:
        raise FormatError(FormatErrorCode.BAD_FIELD, f"{source}: depth and dim must be positive")
    lam = r.f64()
    layers = []
    for _ in range(depth):
        act = r.u32()
        layers.append(FrozenLayer(r.f64_array(dim * dim).reshape(dim, dim), bool(act)))
    adapters = []
    for _ in range(r.u32()):
        idx, hidden = r.u32(), r.u32()
        w1 = r.f64_array(hidden * dim).reshape(hidden, dim)
        w2 = r.f64_array(dim * hidden).reshape(dim, hidden)
        adapters.append(ShiftAdapter(w1, w2, idx))
    r.expect_end()
    try:
        return EncoderModel(layers, adapters, lam, branches[tag])
    except ValueError as exc:
        raise FormatError(FormatErrorCode.BAD_FIELD, f"{source}: {exc}") from exc


def save_checkpoint(path, model: EncoderModel) -> None:
    _binio.atomic_write_bytes(path, checkpoint_bytes(model))


def load_checkpoint(path) -> EncoderModel:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read(), str(path))
