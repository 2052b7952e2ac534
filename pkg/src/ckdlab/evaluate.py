"""Assemble a MetricReport for a trained model on a synthetic dataset."""

from __future__ import annotations

import numpy as np

from . import losses
from . import metrics as M
from .data import Dataset, verification_pairs
from .model import ModelState, embed, predict_logits
from .trainer import VARIANTS

VERIFICATION_SAMPLES = 4
CMC_MAX_RANK = 10
ECE_BINS = 15
GRAM_BINS = 40


def trained_views(variant: str) -> tuple[str, ...]:
    spec = VARIANTS[variant]
    return ("peri", "face") if spec.objective == "kd" else spec.views


def evaluate_model(state: ModelState, dataset: Dataset, variant: str, seed: int = 0,
                   tau: float = losses.DEFAULT_TAU) -> M.MetricReport:
    ev = state if not state.training else state.eval()
    views = trained_views(variant)
    view = "face" if views == ("face",) else "peri"
    gallery, probe, val = dataset["gallery"], dataset["probe"], dataset["validation"]

    def x(split, v):
        return split.face if v == "face" else split.peri

    g_emb = embed(ev, x(gallery, view), view)
    p_emb = embed(ev, x(probe, view), view)
    cmc = M.cmc_curve(M.EmbeddingGallery(g_emb, gallery.labels),
                      M.EmbeddingGallery(p_emb, probe.labels), CMC_MAX_RANK)
    pos, neg = verification_pairs(gallery, VERIFICATION_SAMPLES, seed)
    eer = M.roc_eer(M.pair_scores(g_emb, pos), M.pair_scores(g_emb, neg)).eer
    dbi = M.davies_bouldin(np.concatenate([g_emb, p_emb]),
                           np.concatenate([gallery.labels, probe.labels]))

    z = predict_logits(ev, x(val, view), view)
    post = losses.softmax_with_temperature(z)
    ece, mce = M.calibration(post.max(axis=1), post.argmax(axis=1) == val.labels, ECE_BINS)
    report = M.MetricReport(variant=variant, seed=seed, cmc=[float(c) for c in cmc], eer=eer,
                            ece=ece, mce=mce, dbi=dbi)

    if "face" in views:
        z_f = predict_logits(ev, val.face, "face")
        ent, non_target = M.entropy_metrics(z_f, val.labels)
        report.entropy = float(ent.mean())
        report.non_target_entropy = float(non_target.mean())
    if set(views) == {"peri", "face"}:
        z_p = predict_logits(ev, val.peri, "peri")
        p, p_f = losses.softmax_with_temperature(z_p), losses.softmax_with_temperature(z_f)
        report.hellinger = float(M.hellinger(p, p_f).mean())
        report.mutual_information = M.posterior_mutual_information(p, p_f)
        report.val_kl_f2p = float(losses.kl_np(z_f, z_p, tau).mean())
        fp, _ = M.class_prototypes(embed(ev, val.face, "face"), val.labels)
        pp, _ = M.class_prototypes(embed(ev, val.peri, "peri"), val.labels)
        gram = M.gram_analysis(fp, pp)
        report.gram_mean_similarity = float(gram.face_similarities.mean())
        report.gram_difference = float(np.abs(gram.difference_values).mean())
        report.extra["gram_hist"] = gram_histograms(gram)
    return report


def gram_histograms(gram: M.GramAnalysis, bins: int = GRAM_BINS) -> dict:
    """Counts of off-diagonal prototype similarities and their differences."""
    sim_edges = np.linspace(-1.0, 1.0, bins + 1)
    diff_edges = np.linspace(-2.0, 2.0, bins + 1)
    return {
        "similarity_edges": sim_edges.tolist(),
        "difference_edges": diff_edges.tolist(),
        "face": np.histogram(gram.face_similarities, sim_edges)[0].tolist(),
        "peri": np.histogram(gram.peri_similarities, sim_edges)[0].tolist(),
        "difference": np.histogram(gram.difference_values, diff_edges)[0].tolist(),
    }
