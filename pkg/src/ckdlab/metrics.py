"""Identification, verification, calibration, cluster and posterior analyses."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


def l2_normalize(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cannot normalize a zero-norm vector")
    return x / n


@dataclass
class EmbeddingGallery:
    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.labels):
            raise ValueError("embeddings must be (N, e) with one label per row")


# ------------------------------------------------------------------ identification

def identity_similarities(gallery: EmbeddingGallery, probe: EmbeddingGallery):
    """Per-probe max cosine similarity to each gallery identity.

    Returns ``(sims, identities)`` with ``sims`` of shape (num_probes, num_ids).
    """
    g = l2_normalize(gallery.embeddings)
    p = l2_normalize(probe.embeddings)
    ids = np.unique(gallery.labels)
    cos = p @ g.T
    sims = np.full((len(p), len(ids)), -np.inf)
    for j, ident in enumerate(ids):
        sims[:, j] = cos[:, gallery.labels == ident].max(axis=1)
    return sims, ids


def cmc_curve(gallery: EmbeddingGallery, probe: EmbeddingGallery, max_rank: int = 10) -> np.ndarray:
    """Identification rate at ranks 1..max_rank.

    A probe's rank is one plus the number of identities scoring strictly
    higher than its own.
    """
    missing = sorted(set(np.unique(probe.labels).tolist()) - set(np.unique(gallery.labels).tolist()))
    if missing:
        raise ValueError(f"probe identities absent from gallery: {missing}")
    sims, ids = identity_similarities(gallery, probe)
    col = np.searchsorted(ids, probe.labels)
    own = sims[np.arange(len(sims)), col]
    ranks = 1 + (sims > own[:, None]).sum(axis=1)
    return np.array([(ranks <= r).mean() for r in range(1, max_rank + 1)])


def average_cmc(curves) -> np.ndarray:
    """Mean over gallery/probe folds."""
    return np.mean(np.stack([np.asarray(c, dtype=np.float64) for c in curves]), axis=0)


# ------------------------------------------------------------------ verification

@dataclass
class RocResult:
    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray
    eer: float


def roc_eer(pos_scores, neg_scores) -> RocResult:
    """ROC over every distinct threshold (accept iff score >= t) and the EER.

    The EER is where FAR and FRR cross, linearly interpolated between the two
    bracketing thresholds. The sweep is padded with -inf (accept all) and
    +inf (reject all).
    """
    pos = np.sort(np.asarray(pos_scores, dtype=np.float64))
    neg = np.sort(np.asarray(neg_scores, dtype=np.float64))
    if pos.size == 0 or neg.size == 0:
        raise ValueError("EER needs at least one positive and one negative score")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise ValueError("scores must be finite")
    thr = np.concatenate([[-np.inf], np.unique(np.concatenate([pos, neg])), [np.inf]])
    far = (neg.size - np.searchsorted(neg, thr, side="left")) / neg.size
    frr = np.searchsorted(pos, thr, side="left") / pos.size
    return RocResult(thr, far, frr, _crossing(far, frr))


def _crossing(far: np.ndarray, frr: np.ndarray) -> float:
    d = frr - far
    i = int(np.argmax(d >= 0))  # d goes from -1 to +1 monotonically
    if d[i] == 0 or i == 0:
        return float(far[i])
    a = -d[i - 1] / (d[i] - d[i - 1])
    return float(far[i - 1] + a * (far[i] - far[i - 1]))


def pair_scores(embeddings: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    e = l2_normalize(embeddings)
    return np.einsum("ij,ij->i", e[pairs[:, 0]], e[pairs[:, 1]])


# ------------------------------------------------------------------ calibration

def calibration(confidences, correct, num_bins: int = 15) -> tuple[float, float]:
    """ECE and MCE over equal-width bins ``(lo, hi]`` (zero goes to bin 0)."""
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    conf = np.asarray(confidences, dtype=np.float64)
    ok = np.asarray(correct, dtype=np.float64)
    if conf.size == 0:
        raise ValueError("no predictions to calibrate")
    b = np.clip(np.ceil(conf * num_bins).astype(np.int64) - 1, 0, num_bins - 1)
    ece, mce = 0.0, 0.0
    for k in range(num_bins):
        m = b == k
        n = int(m.sum())
        if n == 0:
            continue
        gap = abs(ok[m].mean() - conf[m].mean())
        ece += n / conf.size * gap
        mce = max(mce, gap)
    return float(ece), float(mce)


# ------------------------------------------------------------------ clusters / structure

def davies_bouldin(embeddings, labels, normalize: bool = True) -> float:
    """DBI with mean-distance scatter and Euclidean centroid separation."""
    x = l2_normalize(embeddings) if normalize else np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if len(ids) < 2:
        raise ValueError("DBI needs at least two classes")
    cents = np.stack([x[labels == i].mean(axis=0) for i in ids])
    scatter = np.array([np.linalg.norm(x[labels == i] - c, axis=1).mean() for i, c in zip(ids, cents)])
    dist = np.linalg.norm(cents[:, None, :] - cents[None, :, :], axis=-1)
    off = ~np.eye(len(ids), dtype=bool)
    if np.any(dist[off] == 0):
        raise ValueError("coincident class centroids")
    ratio = np.where(off, (scatter[:, None] + scatter[None, :]) / np.where(off, dist, 1.0), -np.inf)
    return float(ratio.max(axis=1).mean())


def class_prototypes(embeddings, labels) -> tuple[np.ndarray, np.ndarray]:
    """Re-normalized per-class mean of L2-normalized embeddings."""
    x = l2_normalize(embeddings)
    labels = np.asarray(labels)
    ids = np.unique(labels)
    protos = np.stack([x[labels == i].mean(axis=0) for i in ids])
    return l2_normalize(protos), ids


@dataclass
class GramAnalysis:
    gram_face: np.ndarray
    gram_peri: np.ndarray
    difference: np.ndarray
    face_similarities: np.ndarray
    peri_similarities: np.ndarray
    difference_values: np.ndarray


def gram_analysis(face_protos, peri_protos) -> GramAnalysis:
    face = l2_normalize(face_protos)
    peri = l2_normalize(peri_protos)
    gf, gp = face @ face.T, peri @ peri.T
    for g in (gf, gp):
        g[:] = (g + g.T) / 2
        np.fill_diagonal(g, 1.0)
    diff = gf - gp
    iu = np.triu_indices(len(gf), 1)
    return GramAnalysis(gf, gp, diff, gf[iu], gp[iu], diff[iu])


# ------------------------------------------------------------------ posterior analyses

def _check_simplex(p: np.ndarray, name: str) -> None:
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError(f"{name} is not a probability vector")


def hellinger(p, q) -> np.ndarray:
    """Row-wise Hellinger distance, in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_simplex(p, "p")
    _check_simplex(q, "q")
    return np.linalg.norm(np.sqrt(p) - np.sqrt(q), axis=-1) / math.sqrt(2.0)


def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _entropy(p):
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=-1)


def entropy_metrics(logits, targets) -> tuple[np.ndarray, np.ndarray]:
    """Posterior entropy and entropy of the softmax over non-target logits."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    k = z.shape[1]
    if k < 3:
        raise ValueError("non-target entropy needs at least 3 classes")
    keep = np.ones_like(z, dtype=bool)
    keep[np.arange(len(z)), y] = False
    non_target = z[keep].reshape(len(z), k - 1)
    return _entropy(_softmax(z)), _entropy(_softmax(non_target))


def posterior_mutual_information(p, p_f) -> float:
    """MI of the soft joint ``P(a, b) = mean_i p_i[a] * pF_i[b]``."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    p_f = np.atleast_2d(np.asarray(p_f, dtype=np.float64))
    if len(p) == 0:
        raise ValueError("empty split")
    joint = p.T @ p_f / len(p)
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(joint > 0, joint * np.log(joint / (pa * pb)), 0.0)
    return float(max(terms.sum(), 0.0))


def relative_gain(avg_c: float, avg_p: float, avg_f: float) -> float:
    """Percent of the periocular-to-face gap closed by a configuration."""
    if avg_f == avg_p:
        raise ValueError("gain undefined when the face and periocular baselines coincide")
    return (avg_c - avg_p) / (avg_f - avg_p) * 100.0


# ------------------------------------------------------------------ report

@dataclass
class MetricReport:
    variant: str
    seed: int
    cmc: list[float]
    eer: float
    ece: float | None = None
    mce: float | None = None
    dbi: float | None = None
    entropy: float | None = None
    non_target_entropy: float | None = None
    hellinger: float | None = None
    mutual_information: float | None = None
    val_kl_f2p: float | None = None
    gram_mean_similarity: float | None = None
    gram_difference: float | None = None
    gain_id: float | None = None
    gain_ver: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def rank1(self) -> float:
        return self.cmc[0]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> MetricReport:
        return cls(**d)

    def flat_row(self) -> dict:
        row = {k: v for k, v in self.to_dict().items() if k not in ("cmc", "extra")}
        for i, v in enumerate(self.cmc, 1):
            row[f"rank{i}"] = v
        return row


def write_reports_csv(reports, path) -> Path:
    rows = [r.flat_row() for r in reports]
    path = Path(path)
    cols = list(rows[0]) if rows else []
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if v is None else (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def write_curve_csv(path, xname: str, yname: str, xs, ys) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([xname, yname])
        for x, y in zip(xs, ys):
            w.writerow([repr(float(x)), repr(float(y))])
    return path
