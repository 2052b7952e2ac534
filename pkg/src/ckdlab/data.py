"""Synthetic paired-view identity data and its binary container.

Each identity owns a unit-norm latent. A sample perturbs the latent, then a
fixed random linear map renders the rich (face) view; the bottlenecked
(periocular) view only sees the first ``kept_dims`` latent coordinates. Both
views share a per-sample nuisance vector and get independent observation
noise. By default (``peri_crop``) the periocular maps are the leading rows of
the face maps, so a periocular vector is a crop of a face vector rendered from
a masked latent; with ``peri_crop=False`` they are drawn independently. Test identities never appear in the training or validation splits.

File layout (little-endian), magic ``CKDS``::

    magic[4] | version u32 | meta_len u32 | meta (utf-8 JSON)
    face_dim u32 | peri_dim u32 | num_splits u32
    per split: name_len u16 | name | count u64
               | face f64[count*face_dim] | peri f64[count*peri_dim]
               | labels i64[count]
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

MAGIC = b"CKDS"
VERSION = 1
SPLITS = ("train", "validation", "gallery", "probe")


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


@dataclass(frozen=True)
class GeneratorConfig:
    num_train_ids: int = 64
    num_test_ids: int = 32
    samples_per_id: int = 40
    latent_dim: int = 16
    kept_dims: int = 8
    face_dim: int = 64
    peri_dim: int = 32
    intra_noise: float = 0.1
    nuisance_dim: int = 8
    nuisance: float = 0.5
    obs_noise: float = 0.05
    val_per_id: int = 8
    gallery_per_id: int = 10
    peri_crop: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.kept_dims > self.latent_dim:
            raise ValueError(f"kept_dims ({self.kept_dims}) must not exceed latent_dim ({self.latent_dim})")
        for name in ("num_train_ids", "num_test_ids", "samples_per_id", "latent_dim",
                     "kept_dims", "face_dim", "peri_dim", "nuisance_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("intra_noise", "nuisance", "obs_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.val_per_id < self.samples_per_id:
            raise ValueError("val_per_id must leave at least one training sample per identity")
        if not 0 < self.gallery_per_id < self.samples_per_id:
            raise ValueError("gallery_per_id must leave at least one probe sample per identity")
        if self.peri_crop and self.peri_dim > self.face_dim:
            raise ValueError("peri_crop needs peri_dim <= face_dim")


@dataclass
class Split:
    face: np.ndarray
    peri: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> Split:
        return Split(self.face[idx], self.peri[idx], self.labels[idx])

    def identities(self) -> np.ndarray:
        return np.unique(self.labels)


@dataclass
class Dataset:
    splits: dict[str, Split]
    meta: dict

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]

    @property
    def face_dim(self) -> int:
        return next(iter(self.splits.values())).face.shape[1]

    @property
    def peri_dim(self) -> int:
        return next(iter(self.splits.values())).peri.shape[1]

    @property
    def num_train_classes(self) -> int:
        return int(self.meta["num_train_ids"])


def _peri_maps(rng, c: GeneratorConfig, mix_face, nuis_face):
    """Periocular mixing maps: a crop of the face maps, or independent draws."""
    if c.peri_crop:
        return mix_face[:c.peri_dim], nuis_face[:c.peri_dim]
    return (rng.normal(0, 1 / np.sqrt(c.kept_dims), (c.peri_dim, c.latent_dim)),
            rng.normal(0, 1 / np.sqrt(c.nuisance_dim), (c.peri_dim, c.nuisance_dim)))


def generate_dataset(config: GeneratorConfig) -> Dataset:
    """Draw train/validation (training ids) and gallery/probe (held-out ids)."""
    c = config
    rng = np.random.default_rng(c.seed)
    mix_face = rng.normal(0, 1 / np.sqrt(c.latent_dim), (c.face_dim, c.latent_dim))
    nuis_face = rng.normal(0, 1 / np.sqrt(c.nuisance_dim), (c.face_dim, c.nuisance_dim))
    mix_peri, nuis_peri = _peri_maps(rng, c, mix_face, nuis_face)
    mask = np.zeros(c.latent_dim)
    mask[:c.kept_dims] = 1.0

    total_ids = c.num_train_ids + c.num_test_ids
    centers = rng.normal(size=(total_ids, c.latent_dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)

    n = c.samples_per_id
    labels = np.repeat(np.arange(total_ids), n)
    h = centers[labels] + c.intra_noise * rng.normal(size=(labels.size, c.latent_dim))
    nuis = c.nuisance * rng.normal(size=(labels.size, c.nuisance_dim))
    face = h @ mix_face.T + nuis @ nuis_face.T + c.obs_noise * rng.normal(size=(labels.size, c.face_dim))
    peri = ((h * mask) @ mix_peri.T + nuis @ nuis_peri.T
            + c.obs_noise * rng.normal(size=(labels.size, c.peri_dim)))

    # Position of each sample within its identity block, shuffled per identity.
    order = np.concatenate([rng.permutation(n) for _ in range(total_ids)])
    is_train_id = labels < c.num_train_ids
    idx = {
        "train": np.flatnonzero(is_train_id & (order >= c.val_per_id)),
        "validation": np.flatnonzero(is_train_id & (order < c.val_per_id)),
        "gallery": np.flatnonzero(~is_train_id & (order < c.gallery_per_id)),
        "probe": np.flatnonzero(~is_train_id & (order >= c.gallery_per_id)),
    }
    full = Split(face, peri, labels)
    splits = {name: full.subset(i) for name, i in idx.items()}
    return Dataset(splits, asdict(c))


def verification_pairs(gallery: Split, samples_per_subject: int = 4, seed: int = 0):
    """Pick ``samples_per_subject`` gallery items per identity and pair them.

    Returns ``(positives, negatives)`` as ``(n, 2)`` index arrays into the
    gallery: every within-identity pair, and every cross-identity pair.
    """
    rng = np.random.default_rng(seed)
    chosen = []
    for ident in np.unique(gallery.labels):
        members = np.flatnonzero(gallery.labels == ident)
        if len(members) < samples_per_subject:
            raise ValueError(f"identity {ident} has {len(members)} gallery samples, "
                             f"need {samples_per_subject}")
        chosen.append(np.sort(rng.choice(members, samples_per_subject, replace=False)))
    chosen = np.asarray(chosen)
    k, s = chosen.shape
    within = np.array(list(combinations(range(s), 2)), dtype=np.int64).reshape(-1, 2)
    positives = np.concatenate([chosen[i][within] for i in range(k)]) if k else np.zeros((0, 2), int)
    ia, ib = np.triu_indices(k, 1)
    grid_a = np.repeat(np.arange(s), s)
    grid_b = np.tile(np.arange(s), s)
    negatives = np.stack([
        chosen[ia][:, grid_a].reshape(-1),
        chosen[ib][:, grid_b].reshape(-1),
    ], axis=1)
    return positives, negatives


# ------------------------------------------------------------------ binary IO

def dumps(dataset: Dataset) -> bytes:
    meta = json.dumps(dataset.meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta,
             struct.pack("<III", dataset.face_dim, dataset.peri_dim, len(dataset.splits))]
    for name, split in dataset.splits.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<Q", len(split)))
        parts.append(np.ascontiguousarray(split.face, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(split.peri, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(split.labels, dtype="<i8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetFormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        item = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(item * count, what), dtype=dtype).copy()


def loads(buf: bytes) -> Dataset:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version, meta_len = r.unpack("<II", "header")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    meta_at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"unreadable metadata: {exc}", meta_at) from None
    face_dim, peri_dim, count = r.unpack("<III", "dimensions")
    splits = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "split name length")
        name = r.take(name_len, "split name").decode("utf-8", errors="replace")
        (n,) = r.unpack("<Q", f"split {name} size")
        face = r.array("<f8", n * face_dim, f"split {name} face payload").reshape(n, face_dim)
        peri = r.array("<f8", n * peri_dim, f"split {name} periocular payload").reshape(n, peri_dim)
        labels = r.array("<i8", n, f"split {name} labels")
        splits[name] = Split(face.astype(np.float64), peri.astype(np.float64), labels.astype(np.int64))
    if r.pos != len(buf):
        raise DatasetFormatError("trailing bytes after last split", r.pos)
    return Dataset(splits, meta)


def save_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps(dataset))
    return path


def load_dataset(path) -> Dataset:
    return loads(Path(path).read_bytes())


def dataset_round_trip(dataset: Dataset) -> Dataset:
    return loads(dumps(dataset))
