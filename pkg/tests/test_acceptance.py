"""Acceptance criteria 1-9, one test and one verdict line each.

Run alone with ``pytest tests/test_acceptance.py -v``; the verdict lines are
printed in the "acceptance criteria" section of the terminal summary. The
directional reproduction (7) trains 40 models and the determinism check (9)
trains the 9-variant grid twice, so this module takes several minutes.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_LINES
from gradcheck import PRIMITIVES, model_loss_error, primitive_error
from ckdlab import autodiff as ad
from ckdlab import metrics as M
from ckdlab import theory
from ckdlab.config import ExperimentConfig
from ckdlab.data import Split, verification_pairs
from ckdlab.experiment import ablation_grid
from ckdlab.losses import kl_rows, regularizer_R

pytestmark = pytest.mark.slow

SEEDS = tuple(range(10))
DIRECTIONAL = ("CE", "CKD_FULL", "KD_TWO_STAGE", "NO_REG_SW_SBS")


def verdict(number: int, passed: bool, detail: str) -> None:
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


# ------------------------------------------------------------------ 1-3 theory

def test_criterion_1_theory_identities():
    t0 = time.perf_counter()
    lemma = theory.verify_lemma1(trials=1000, seed=0)
    thm = theory.verify_theorem1(trials=1000, seed=0)
    seconds = time.perf_counter() - t0
    lv, tv, tg = (lemma.check("value").residual, thm.check("value").residual,
                  thm.check("gradient").residual)
    ok = lv < 1e-9 and tv < 1e-9 and tg < 1e-6 and seconds < 10
    verdict(1, ok, f"lemma residual {lv:.2e}, theorem value {tv:.2e}, gradient rel err {tg:.2e}, "
                   f"{lemma.check('value').trials}+{thm.check('value').trials} trials in {seconds:.1f}s")


def test_criterion_2_regularizer():
    reg = theory.verify_regularizer(trials=1000, seed=0)
    grid = theory.verify_regularizer_grid()
    rng = np.random.default_rng(1)
    unit = max(abs(float(regularizer_R(rng.normal(0, 3, rng.integers(2, 65)), 1.0))) for _ in range(1000))
    endpoint = reg.check("sparse_endpoint").residual
    ok = reg.passed and grid.passed and unit <= 1e-12 and endpoint < 1e-10
    failed = [c.name for e in (reg, grid) for c in e.checks if not c.passed]
    verdict(2, ok, f"R>=0 on 1000 trials, max |R(tau=1)| {unit:.1e}, sparse endpoint {endpoint:.1e}, "
                   f"grid boundary maxima and tau ordering {'hold' if grid.passed else 'fail'}"
                   + (f", failed {failed}" if failed else ""))


def test_criterion_3_smooth_label_limit():
    entry = theory.verify_smooth_label_limit()
    gap, ent = entry.check("gap_final").residual, entry.check("entropy_final").residual
    ok = entry.passed and gap < 1e-3 and ent < 1e-3
    verdict(3, ok, f"sup gap at tau=1000 {gap:.2e}, log K - H {ent:.2e}, monotone "
                   f"{entry.check('gap_monotone').passed and entry.check('entropy_monotone').passed}")


# ------------------------------------------------------------------ 4 autodiff

def test_criterion_4_autodiff():
    rng = np.random.default_rng(0)
    worst = {name: max(primitive_error(name, rng) for _ in range(100)) for name in PRIMITIVES}
    model = max(model_loss_error(rng) for _ in range(100))
    x = rng.normal(size=(4, 6))
    _, (g_sg,) = ad.grad(lambda a: ad.reduce_sum(ad.exp(ad.stop_gradient(a))), x)
    _, (g_t, _) = ad.grad(lambda a, b: ad.reduce_sum(kl_rows(a, b, 2.5)), x, rng.normal(size=(4, 6)))
    zero = not g_sg.any() and not g_t.any()
    prim = max(worst.values())
    ok = prim < 1e-5 and model < 1e-5 and zero
    verdict(4, ok, f"{len(PRIMITIVES)} primitives x 100 instances worst rel err {prim:.1e} "
                   f"({max(worst, key=worst.get)}), full model loss x 100 worst {model:.1e}, "
                   f"stop-gradient exactly zero {zero}")


# ------------------------------------------------------------------ 5 metric oracles

def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(0)
    n = 25
    err = {k: 0.0 for k in ("eer", "cmc", "ece", "mce", "dbi", "hellinger", "mi")}
    invariant, monotone = True, True
    for _ in range(n):
        pos = np.round(rng.normal(1, 1, rng.integers(1, 30)), 1)
        neg = np.round(rng.normal(0, 1, rng.integers(1, 30)), 1)
        e = M.roc_eer(pos, neg).eer
        err["eer"] = max(err["eer"], abs(e - oracles.eer(pos, neg)))
        for f in (np.exp, np.arctan, lambda s: 5 * s + 1):
            invariant &= abs(M.roc_eer(f(pos), f(neg)).eer - e) < 1e-12

        k = int(rng.integers(2, 8))
        centers = rng.normal(size=(k, 3))
        gy, py = np.repeat(np.arange(k), 2), np.repeat(np.arange(k), 3)
        gx, px = centers[gy] + rng.normal(size=(2 * k, 3)), centers[py] + rng.normal(size=(3 * k, 3))
        curve = M.cmc_curve(M.EmbeddingGallery(gx, gy), M.EmbeddingGallery(px, py), 10)
        err["cmc"] = max(err["cmc"], float(np.abs(curve - oracles.cmc(gx, gy, px, py, 10)).max()))
        monotone &= bool(np.all(np.diff(curve) >= 0))

        conf = rng.uniform(size=40)
        ok_ = rng.random(40) < conf
        ours, ref = M.calibration(conf, ok_, 10), oracles.calibration(conf, ok_, 10)
        err["ece"] = max(err["ece"], abs(ours[0] - ref[0]))
        err["mce"] = max(err["mce"], abs(ours[1] - ref[1]))

        x = np.vstack([gx, px])
        y = np.concatenate([gy, py])
        err["dbi"] = max(err["dbi"], abs(M.davies_bouldin(x, y) - oracles.davies_bouldin(x, y)))

        p, q = oracles.random_simplex(rng, 2, k)
        err["hellinger"] = max(err["hellinger"], abs(M.hellinger(p, q) - oracles.hellinger(p, q)))
        pp, pf = oracles.random_simplex(rng, 30, k), oracles.random_simplex(rng, 30, k)
        err["mi"] = max(err["mi"], abs(M.posterior_mutual_information(pp, pf)
                                       - oracles.mutual_information(pp, pf)))
    ok = max(err.values()) < 1e-12 and invariant and monotone
    worst = ", ".join(f"{k} {v:.0e}" for k, v in err.items())
    verdict(5, ok, f"{n} instances each, max abs diff: {worst}; EER transform-invariant {invariant}, "
                   f"CMC monotone {monotone}")


# ------------------------------------------------------------------ 6 gain

def test_criterion_6_gain():
    lo, hi = M.relative_gain(85.49, 85.49, 92.63), M.relative_gain(92.63, 85.49, 92.63)
    table = M.relative_gain(88.96, 85.49, 92.63)
    ok = lo == 0.0 and hi == 100.0 and round(table) == 49
    verdict(6, ok, f"Gain(CE)={lo}, Gain(Face CE)={hi}, Gain(88.96, 85.49, 92.63)={table:.2f}")


# ------------------------------------------------------------------ 7 directional reproduction

@pytest.fixture(scope="module")
def directional(tmp_path_factory):
    cfg = ExperimentConfig(seeds=SEEDS, variants=DIRECTIONAL)
    t0 = time.perf_counter()
    grid = ablation_grid(cfg, tmp_path_factory.mktemp("directional"))
    by = {(r.variant, r.seed): r for r in grid.reports}
    return by, time.perf_counter() - t0


def _compare(by, better, worse, field_, lower=True, ties_ok=False):
    """Seed wins and the mean gap oriented so that a positive gap favors ``better``."""
    a = np.array([getattr(by[(better, s)], field_) for s in SEEDS])
    b = np.array([getattr(by[(worse, s)], field_) for s in SEEDS])
    diff = (b - a) if lower else (a - b)
    wins = int((diff >= 0).sum() if ties_ok else (diff > 0).sum())
    return wins, float(diff.mean()), float(a.mean()), float(b.mean())


def test_criterion_7_directional(directional):
    by, seconds = directional
    parts = {
        "a rank1 CKD>=CE": _compare(by, "CKD_FULL", "CE", "rank1", lower=False, ties_ok=True),
        "a EER CKD<=CE": _compare(by, "CKD_FULL", "CE", "eer", ties_ok=True),
        "b val KL CKD<KD": _compare(by, "CKD_FULL", "KD_TWO_STAGE", "val_kl_f2p"),
        "c Hellinger CKD<KD": _compare(by, "CKD_FULL", "KD_TWO_STAGE", "hellinger"),
        "d DBI CKD<CE": _compare(by, "CKD_FULL", "CE", "dbi"),
        "e non-target H CKD<NO_REG": _compare(by, "CKD_FULL", "NO_REG_SW_SBS", "non_target_entropy"),
    }
    majority = len(SEEDS) // 2 + 1
    ok = all(w >= majority and gap > 0 for w, gap, _, _ in parts.values()) and seconds < 30 * 60
    detail = "; ".join(f"{k}: {w}/{len(SEEDS)} seeds, means {a:.4f} vs {b:.4f}"
                       for k, (w, _, a, b) in parts.items())
    verdict(7, ok, f"{detail}; {len(by)} runs in {seconds / 60:.1f} min")


# ------------------------------------------------------------------ 8 pair counts

def test_criterion_8_pair_counts():
    labels = np.repeat(np.arange(200), 10)
    gallery = Split(np.zeros((len(labels), 1)), np.zeros((len(labels), 1)), labels)
    pos, neg = verification_pairs(gallery, 4, seed=0)
    ok = len(pos) == 1200 and len(neg) == 318400
    verdict(8, ok, f"K=200 gives {len(pos)} positives and {len(neg)} negatives")


# ------------------------------------------------------------------ 9 determinism

def test_criterion_9_determinism(tmp_path):
    cfg = ExperimentConfig()
    first = ablation_grid(cfg, tmp_path / "a", workers=1)
    second = ablation_grid(replace(cfg), tmp_path / "b", workers=2)
    same_reports = [r.to_json() for r in first.reports] == [r.to_json() for r in second.reports]
    same_table = (tmp_path / "a" / "table1.csv").read_bytes() == (tmp_path / "b" / "table1.csv").read_bytes()
    same_ckpt = all(
        (tmp_path / "a" / "runs" / r.extra["run"] / "checkpoint.ckdc").read_bytes()
        == (tmp_path / "b" / "runs" / r.extra["run"] / "checkpoint.ckdc").read_bytes()
        for r in first.reports)
    ok = same_reports and same_table and same_ckpt and len(first.reports) == 9
    verdict(9, ok, f"{len(first.reports)} variants re-run (1 vs 2 workers): reports identical "
                   f"{same_reports}, table identical {same_table}, checkpoints identical {same_ckpt}")
