"""Embedding files, dataset manifests and a synthetic multi-anomaly generator.

Embedding file layout (little-endian)::

    "SDMA" | u32 version (=1) | u32 count | u32 dim | count*dim f64, row-major

The manifest is JSON: category names, the anchor reference and one record
per vector (id, role, file, row, label bits, optional prompt text).

Synthetic geometry
------------------
Category base directions are unit vectors rejection-sampled so that every
pair has cosine below ``similarity_cap``.  Each category's signs scatter
around its base (``sign_spread``).  The normal direction mixes a fresh
direction with the sum of the categories' mean signs (``anchor_share``), so a
normal prompt is moderately similar to every anomaly.  Noise terms are
``sigma * g`` with ``g ~ N(0, I / dim)``, which makes ``sigma`` the expected
noise norm regardless of ``dim``.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _binio
from ._binio import FormatError, FormatErrorCode
from .numcore import RngState, l2_normalize, sample_gaussian
from .trainer import FewShotDataset, PromptInputs

__all__ = [
    "ManifestError",
    "SyntheticSpec",
    "GroundTruth",
    "SyntheticData",
    "embeddings_bytes",
    "embeddings_from_bytes",
    "write_embeddings",
    "read_embeddings",
    "generate",
    "save_dataset",
    "load_manifest",
    "write_files_atomically",
]

EMBEDDING_VERSION = 1
MANIFEST_FORMAT = "multianomaly-manifest"
MANIFEST_VERSION = 1
ROLES = ("train-shot", "test", "prompt")


class ManifestError(ValueError):
    """A manifest record is inconsistent or points at nothing."""


# -- embedding files ----------------------------------------------------------

def embeddings_bytes(records) -> bytes:
    arr = np.asarray(records, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"records must be 2-D (count x dim), got shape {arr.shape}")
    count, dim = arr.shape
    return b"".join([
        _binio.MAGIC,
        _binio.pack_u32(EMBEDDING_VERSION),
        _binio.pack_u32(count),
        _binio.pack_u32(dim),
        _binio.pack_f64_array(arr),
    ])


def embeddings_from_bytes(data: bytes, source: str = "<embeddings>") -> np.ndarray:
    r = _binio.Reader(data, source)
    r.expect_magic()
    version = r.u32()
    if version != EMBEDDING_VERSION:
        raise FormatError(FormatErrorCode.BAD_VERSION, f"{source}: unsupported version {version}")
    count, dim = r.u32(), r.u32()
    payload = len(data) - r.pos
    if payload < count * dim * 8:
        raise FormatError(FormatErrorCode.TRUNCATED,
                          f"{source}: header declares {count}x{dim} reals, payload holds {payload} bytes")
    if payload > count * dim * 8:
        raise FormatError(FormatErrorCode.SIZE_MISMATCH,
                          f"{source}: header declares {count}x{dim} reals, payload holds {payload} bytes")
    return r.f64_array(count * dim).reshape(count, dim)


def write_embeddings(path, records) -> None:
    _binio.atomic_write_bytes(path, embeddings_bytes(records))


def read_embeddings(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return embeddings_from_bytes(fh.read(), str(path))


# -- synthetic generator ------------------------------------------------------

@dataclass
class SyntheticSpec:
    num_categories: int = 6
    signs_per_category: int = 4
    dim: int = 64
    prompt_noise: float = 0.05
    image_noise: float = 0.05
    outlier_rate: float = 0.2
    shots_per_category: int = 1
    normal_shots: int = 1
    test_per_pattern: int = 50
    normal_test: int = 0
    multi_label_rate: float = 0.25
    sign_spread: float = 0.3
    outlier_noise: float = 0.8
    anchor_share: float = 0.7
    similarity_cap: float = 0.3
    max_tries: int = 10_000
    seed: int = 7

    def validate(self) -> None:
        if self.num_categories < 1 or self.signs_per_category < 1 or self.dim < 1:
            raise ValueError("num_categories, signs_per_category and dim must be >= 1")
        for name in ("outlier_rate", "multi_label_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("prompt_noise", "image_noise", "sign_spread", "outlier_noise", "anchor_share"):
            if not getattr(self, name) >= 0.0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("shots_per_category", "normal_shots", "test_per_pattern", "normal_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.shots_per_category + self.normal_shots < 1:
            raise ValueError("need at least one training shot")
        if self.outlier_rate > 0 and self.num_categories < 2:
            raise ValueError("outlier prompts need at least two categories")
        if self.dim < self.num_categories * self.signs_per_category:
            warnings.warn("dim is smaller than the total number of signs; categories may crowd",
                          stacklevel=2)

    def category_names(self) -> list[str]:
        return [f"anomaly_{i}" for i in range(self.num_categories)]


@dataclass
class GroundTruth:
    """What the generator planted.

    ``prompt_flags[c][j]`` is ``{"kind": "genuine"}`` or
    ``{"kind": "outlier", "source_category": k, "source_sign": j'}``.
    """

    prompt_flags: dict[str, list[dict]]
    test_signs: list[list[str]]
    sign_directions: np.ndarray  # categories x signs x dim
    base_directions: np.ndarray  # categories x dim
    anchor_direction: np.ndarray

    def outlier_mask(self, category: str) -> np.ndarray:
        return np.array([f["kind"] == "outlier" for f in self.prompt_flags[category]])


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    train: FewShotDataset
    test: FewShotDataset
    prompts: PromptInputs
    truth: GroundTruth


def _noise(rng: RngState, dim: int, sigma: float) -> np.ndarray:
    return sample_gaussian(rng, dim, sigma / math.sqrt(dim))


def _separated_directions(rng: RngState, n: int, dim: int, cap: float, max_tries: int) -> np.ndarray:
    accepted: list[np.ndarray] = []
    for _ in range(n):
        for _ in range(max_tries):
            cand = sample_gaussian(rng, dim, 1.0)
            norm = float(np.linalg.norm(cand))
            if norm == 0.0:
                continue
            cand = cand / norm
            if all(float(cand @ a) < cap for a in accepted):
                accepted.append(cand)
                break
        else:
            raise RuntimeError(
                f"could not place {n} directions with pairwise cosine < {cap} in {max_tries} "
                f"tries each; use a larger dim or a looser cap"
            )
    return np.vstack(accepted)


def generate(spec: SyntheticSpec) -> SyntheticData:
    """Draw a full synthetic problem from ``spec.seed``.

    The draw order is fixed: directions, signs, prompts, anchor prompt,
    training shots, test images.
    """
    spec.validate()
    rng = RngState(spec.seed)
    d, s, dim = spec.num_categories, spec.signs_per_category, spec.dim
    names = spec.category_names()

    dirs = _separated_directions(rng, d + 1, dim, spec.similarity_cap, spec.max_tries)
    bases, fresh_normal = dirs[:d], dirs[d]
    signs = np.empty((d, s, dim))
    for c in range(d):
        for j in range(s):
            signs[c, j] = l2_normalize(bases[c] + _noise(rng, dim, spec.sign_spread))
    mean_signs = np.vstack([l2_normalize(signs[c].mean(axis=0)) for c in range(d)])
    anchor_dir = l2_normalize(fresh_normal + spec.anchor_share * mean_signs.sum(axis=0))

    prompts, texts, flags = {}, {}, {}
    for c, name in enumerate(names):
        rows, row_texts, row_flags = [], [], []
        for j in range(s):
            u = rng.uniform(1)[0]
            if u < spec.outlier_rate:
                k = int(rng.next_uint64(1)[0] % np.uint64(d - 1))
                k = k if k < c else k + 1
                jj = int(rng.next_uint64(1)[0] % np.uint64(s))
                rows.append(l2_normalize(signs[k, jj] + _noise(rng, dim, spec.outlier_noise)))
                row_texts.append(f"{name}: sign {j} (drawn from {names[k]} sign {jj})")
                row_flags.append({"kind": "outlier", "source_category": names[k], "source_sign": jj})
            else:
                rows.append(l2_normalize(signs[c, j] + _noise(rng, dim, spec.prompt_noise)))
                row_texts.append(f"{name}: sign {j}")
                row_flags.append({"kind": "genuine"})
        prompts[name] = np.vstack(rows)
        texts[name] = row_texts
        flags[name] = row_flags
    anchor = l2_normalize(anchor_dir + _noise(rng, dim, spec.prompt_noise))
    prompt_inputs = PromptInputs(tuple(names), prompts, anchor, texts, "normal")

    def image(label_idx):
        if not label_idx:
            return l2_normalize(anchor_dir + _noise(rng, dim, spec.image_noise))
        return l2_normalize(mean_signs[list(label_idx)].sum(axis=0) + _noise(rng, dim, spec.image_noise))

    def onehot(label_idx):
        y = np.zeros(d, dtype=np.int64)
        y[list(label_idx)] = 1
        return y

    tr_x, tr_y, tr_ids = [], [], []
    for c in range(d):
        for k in range(spec.shots_per_category):
            tr_x.append(image([c]))
            tr_y.append(onehot([c]))
            tr_ids.append(f"train-{names[c]}-{k}")
    for k in range(spec.normal_shots):
        tr_x.append(image([]))
        tr_y.append(onehot([]))
        tr_ids.append(f"train-normal-{k}")

    te_x, te_y, te_ids, te_signs = [], [], [], []
    for c in range(d):
        for k in range(spec.test_per_pattern):
            label = [c]
            if d > 1 and rng.uniform(1)[0] < spec.multi_label_rate:
                extra = int(rng.next_uint64(1)[0] % np.uint64(d - 1))
                label.append(extra if extra < c else extra + 1)
            label = sorted(label)
            te_x.append(image(label))
            te_y.append(onehot(label))
            te_ids.append(f"test-{len(te_ids):04d}")
            te_signs.append([names[i] for i in label])
    for k in range(spec.normal_test):
        te_x.append(image([]))
        te_y.append(onehot([]))
        te_ids.append(f"test-{len(te_ids):04d}")
        te_signs.append([])

    train = FewShotDataset(np.vstack(tr_x), np.vstack(tr_y), tuple(names), tr_ids)
    if te_x:
        test = FewShotDataset(np.vstack(te_x), np.vstack(te_y), tuple(names), te_ids)
    else:
        test = FewShotDataset(np.empty((0, dim)), np.empty((0, d)), tuple(names), [])
    truth = GroundTruth(flags, te_signs, signs, bases, anchor_dir)
    return SyntheticData(spec, train, test, prompt_inputs, truth)


# -- manifest -----------------------------------------------------------------

def write_files_atomically(out_dir, files: dict[str, bytes]) -> None:
    """Write every file or none of them.

    All payloads go to temp files first; they are renamed into place only
    once every write succeeded.
    """
    out_dir = os.fspath(out_dir)
    if not os.path.isdir(out_dir):
        raise FileNotFoundError(f"output directory {out_dir!r} does not exist")
    temps = {}
    try:
        for name, data in files.items():
            fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".tmp-", suffix="-" + name)
            temps[name] = tmp
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
        for name, tmp in temps.items():
            os.replace(tmp, os.path.join(out_dir, name))
    finally:
        for tmp in temps.values():
            if os.path.exists(tmp):
                os.unlink(tmp)


def _truth_json(truth: GroundTruth) -> dict:
    return {
        "prompt_flags": truth.prompt_flags,
        "test_signs": truth.test_signs,
        "directions_file": "signs.emb",
        "directions_layout": "category-major sign directions, then category bases, then anchor",
    }


def dataset_files(data: SyntheticData) -> dict[str, bytes]:
    """Every file that :func:`save_dataset` writes, as bytes."""
    cats = list(data.prompts.categories)
    d = len(cats)
    records = []

    def add(role, file, rows, labels, ids, texts=None):
        for i in range(rows):
            rec = {"id": ids[i], "role": role, "file": file, "row": i,
                   "labels": [int(b) for b in labels[i]]}
            if texts is not None:
                rec["text"] = texts[i]
            records.append(rec)

    add("train-shot", "train.emb", len(data.train), data.train.labels, data.train.ids)
    add("test", "test.emb", len(data.test), data.test.labels, data.test.ids)
    prompt_ids, prompt_labels, prompt_texts = [], [], []
    for ci, c in enumerate(cats):
        for j in range(len(data.prompts.prompts[c])):
            prompt_ids.append(f"prompt-{c}-{j}")
            y = [0] * d
            y[ci] = 1
            prompt_labels.append(y)
            prompt_texts.append(data.prompts.texts[c][j])
    stacked = data.prompts.stacked()
    add("prompt", "prompts.emb", len(stacked) - 1, prompt_labels, prompt_ids, prompt_texts)

    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "categories": cats,
        "dim": int(stacked.shape[1]),
        "anchor": {"file": "prompts.emb", "row": len(stacked) - 1, "text": data.prompts.anchor_text},
        "synthetic_spec": asdict(data.spec),
        "records": records,
    }
    t = data.truth
    directions = np.vstack([t.sign_directions.reshape(-1, t.sign_directions.shape[-1]),
                            t.base_directions, t.anchor_direction[None, :]])
    return {
        "train.emb": embeddings_bytes(data.train.inputs),
        "test.emb": embeddings_bytes(data.test.inputs.reshape(-1, stacked.shape[1])),
        "prompts.emb": embeddings_bytes(stacked),
        "signs.emb": embeddings_bytes(directions),
        "ground_truth.json": (json.dumps(_truth_json(t), indent=2) + "\n").encode(),
        "manifest.json": (json.dumps(manifest, indent=2) + "\n").encode(),
    }


def save_dataset(data: SyntheticData, out_dir) -> list[str]:
    files = dataset_files(data)
    write_files_atomically(out_dir, files)
    return sorted(files)


def load_ground_truth(directory, spec: SyntheticSpec | None = None) -> GroundTruth:
    with open(os.path.join(directory, "ground_truth.json")) as fh:
        raw = json.load(fh)
    dirs = read_embeddings(os.path.join(directory, raw["directions_file"]))
    n_cat = len(raw["prompt_flags"])
    n_sign = (len(dirs) - n_cat - 1) // n_cat
    return GroundTruth(
        raw["prompt_flags"],
        raw["test_signs"],
        dirs[:n_cat * n_sign].reshape(n_cat, n_sign, -1),
        dirs[n_cat * n_sign:n_cat * n_sign + n_cat],
        dirs[-1],
    )


def load_manifest(path):
    """Resolve a manifest into ``(train, test, prompt_inputs)``."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: not a {MANIFEST_FORMAT} file")
    if manifest.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {manifest.get('version')}")
    cats = tuple(manifest["categories"])
    if len(set(cats)) != len(cats) or not cats:
        raise ManifestError(f"{path}: category names must be unique and non-empty")
    cache: dict[str, np.ndarray] = {}

    def resolve(rec_id, file, row):
        if file not in cache:
            full = os.path.join(base, file)
            if not os.path.exists(full):
                raise ManifestError(f"record {rec_id!r}: file {file!r} does not exist")
            cache[file] = read_embeddings(full)
        arr = cache[file]
        if not isinstance(row, int) or not 0 <= row < len(arr):
            raise ManifestError(f"record {rec_id!r}: row {row} outside {file!r} ({len(arr)} rows)")
        return arr[row]

    groups = {role: [] for role in ROLES}
    for rec in manifest["records"]:
        rec_id = rec.get("id", "<unnamed>")
        role = rec.get("role")
        if role not in ROLES:
            raise ManifestError(f"record {rec_id!r}: unknown role {role!r}")
        labels = rec.get("labels", [])
        if len(labels) != len(cats):
            raise ManifestError(
                f"record {rec_id!r}: label width {len(labels)} does not match {len(cats)} categories")
        if any(b not in (0, 1) for b in labels):
            raise ManifestError(f"record {rec_id!r}: labels must be 0/1")
        if role == "prompt" and sum(labels) != 1:
            raise ManifestError(f"record {rec_id!r}: a prompt must carry exactly one category")
        groups[role].append((rec_id, resolve(rec_id, rec["file"], rec["row"]), labels, rec.get("text")))

    anchor_ref = manifest.get("anchor")
    if not anchor_ref:
        raise ManifestError(f"{path}: missing anchor reference")
    anchor = resolve("anchor", anchor_ref["file"], anchor_ref["row"])
    dim = len(anchor)

    def dataset(role):
        recs = groups[role]
        if not recs:
            return FewShotDataset(np.empty((0, dim)), np.empty((0, len(cats))), cats, [])
        return FewShotDataset(np.vstack([r[1] for r in recs]), np.vstack([r[2] for r in recs]), cats,
                              [r[0] for r in recs])

    prompts = {c: [] for c in cats}
    texts = {c: [] for c in cats}
    for rec_id, vec, labels, text in groups["prompt"]:
        c = cats[labels.index(1)]
        prompts[c].append(vec)
        texts[c].append(text if text is not None else rec_id)
    empty = [c for c in cats if not prompts[c]]
    if empty:
        raise ManifestError(f"{path}: categories without prompts: {empty}")
    prompt_inputs = PromptInputs(cats, {c: np.vstack(v) for c, v in prompts.items()}, anchor, texts,
                                 anchor_ref.get("text", "normal"))
    train = dataset("train-shot")
    if len(train) == 0:
        raise ManifestError(f"{path}: no train-shot records")
    return train, dataset("test"), prompt_inputs
