"""Numerical certification of the loss identities and regularizer properties.

Each ``verify_*`` function returns a :class:`TheoryEntry` made of named
checks. A check records the worst residual (or limit gap) seen over its
trials, the tolerance it was held to, and passes iff residual <= tolerance.
Monotonicity checks use the largest step in the wrong direction as their
residual with tolerance 0, so a flat step counts as a pass.

Limits cannot be machine-checked directly, so they are certified on the fixed
grids defined below as monotone trends plus a threshold at the grid end.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .losses import (LogitPair, entropy, log_softmax_np, pair_gradients, regularizer_R,
                     smooth_label, softmax_with_temperature)

VALUE_TOL = 1e-9
GRAD_TOL = 1e-6
LOGIT_STD = 3.0
K_RANGE = (2, 64)
TAU_RANGE = (1.0, 10.0)
EXTREME_SCALE = 500.0

SMOOTH_TAU_GRID = (1.0, 10.0, 100.0, 1000.0)
SMOOTH_K = 8
SMOOTH_GAP_TOL = 1e-3

REG_TAU_GRID = (1.0, 2.5, 5.0, 10.0, 50.0)
REG_SPARSE_PATH = (1.0, 5.0, 20.0, 50.0)
REG_SPARSE_TAU = 2.5
REG_SPARSE_TOL = 1e-10
REG_BOUND = 10.0

GRID_TAUS = (1.25, 2.5, 5.0)


@dataclass
class Check:
    name: str
    trials: int
    residual: float
    tolerance: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.residual = float(self.residual)
        self.passed = bool(self.residual <= self.tolerance)


@dataclass
class TheoryEntry:
    claim: str
    checks: list[Check]
    seconds: float = 0.0
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        for c, raw in zip(self.checks, d["checks"]):
            raw["passed"] = c.passed
        return d


@dataclass
class TheoryReport:
    entries: list[TheoryEntry]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def entry(self, claim: str) -> TheoryEntry:
        for e in self.entries:
            if e.claim == claim:
                return e
        raise KeyError(claim)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "entries": [e.to_dict() for e in self.entries]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n")
        return path


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def _draw_pair(rng: np.random.Generator, k_range, tau_range, std: float) -> LogitPair:
    k = int(rng.integers(k_range[0], k_range[1] + 1))
    tau = float(rng.uniform(*tau_range))
    return LogitPair(rng.normal(0, std, k), rng.normal(0, std, k), int(rng.integers(k)), tau)


def _monotone_violation(values, increasing: bool) -> float:
    steps = np.diff(np.asarray(values, dtype=np.float64))
    if steps.size == 0:
        return 0.0
    worst = -steps.min() if increasing else steps.max()
    return max(float(worst), 0.0)


# ------------------------------------------------------------------ identities

def lemma1_residual(z, z_f, tau: float) -> float:
    """``|H(pF_tau, p_tau) - H(pF_tau, p)/tau - R(z)/tau|`` for one sample."""
    target = softmax_with_temperature(z_f, tau)
    lhs = -(target * log_softmax_np(z, tau)).sum()
    rhs = -(target * log_softmax_np(z)).sum() / tau + float(regularizer_R(z, tau)) / tau
    return abs(float(lhs - rhs))


def verify_lemma1(trials: int = 1000, k_range=(2, 32), tau_range=TAU_RANGE, seed: int = 0,
                  std: float = LOGIT_STD) -> TheoryEntry:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        p = _draw_pair(rng, k_range, tau_range, std)
        worst = max(worst, lemma1_residual(p.z, p.z_f, p.tau))
    return TheoryEntry("lemma1", [Check("value", trials, worst, VALUE_TOL)],
                       time.perf_counter() - t0,
                       {"k_range": list(k_range), "tau_range": list(tau_range), "seed": seed})


def theorem1_gradient_error(pair: LogitPair) -> float:
    g_full = pair_gradients(losses.full_loss_t, pair, labels=[pair.y], tau=pair.tau)
    g_dec = pair_gradients(losses.decomposed_objective_t, pair, labels=[pair.y], tau=pair.tau)
    a = np.concatenate(g_full)
    b = (1.0 + pair.tau) * np.concatenate(g_dec)
    return _rel_err(a, b)


def verify_theorem1(trials: int = 1000, seed: int = 0, k_range=K_RANGE, tau_range=TAU_RANGE,
                    std: float = LOGIT_STD, extreme_trials: int = 20) -> TheoryEntry:
    """Value identity with entropy offsets plus the scaled gradient identity.

    The random trials are followed by ``extreme_trials`` draws rescaled so
    that the largest logit magnitude is exactly ``EXTREME_SCALE``.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    pairs = [_draw_pair(rng, k_range, tau_range, std) for _ in range(trials)]
    for _ in range(extreme_trials):
        p = _draw_pair(rng, k_range, tau_range, std)
        s = EXTREME_SCALE / max(np.abs(p.z).max(), np.abs(p.z_f).max())
        pairs.append(LogitPair(p.z * s, p.z_f * s, p.y, p.tau))
    value = max(losses.theorem1_residual(p) for p in pairs)
    gradient = max(theorem1_gradient_error(p) for p in pairs)
    n = len(pairs)
    return TheoryEntry("theorem1", [Check("value", n, value, VALUE_TOL),
                                    Check("gradient", n, gradient, GRAD_TOL)],
                       time.perf_counter() - t0,
                       {"random_trials": trials, "extreme_trials": extreme_trials,
                        "extreme_scale": EXTREME_SCALE, "seed": seed})


# ------------------------------------------------------------------ limits

def smooth_label_path(z, y: int, taus=SMOOTH_TAU_GRID) -> tuple[np.ndarray, np.ndarray]:
    """Sup-distance of the smoothed label to uniform, and its entropy, per tau."""
    z = np.asarray(z, dtype=np.float64)
    k = z.size
    gaps, ents = [], []
    for tau in taus:
        y_tilde = smooth_label(y, softmax_with_temperature(z, tau), tau)
        gaps.append(np.abs(y_tilde - 1.0 / k).max())
        ents.append(entropy(y_tilde))
    return np.array(gaps), np.array(ents)


def verify_smooth_label_limit(taus=SMOOTH_TAU_GRID, seed: int = 0, num_classes: int = SMOOTH_K,
                              std: float = 1.0) -> TheoryEntry:
    """The smoothed label drifts to uniform as tau grows.

    The posterior minimizing ``H(y_tilde, q)`` over q is ``y_tilde`` itself,
    so its entropy is ``H(y_tilde)`` and is compared against ``log K``.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    z = rng.normal(0, std, num_classes)
    y = int(rng.integers(num_classes))
    gaps, ents = smooth_label_path(z, y, taus)
    log_k = np.log(num_classes)
    checks = [
        Check("gap_monotone", len(taus), _monotone_violation(gaps, increasing=False), 0.0),
        Check("gap_final", 1, gaps[-1], SMOOTH_GAP_TOL),
        Check("entropy_monotone", len(taus), _monotone_violation(ents, increasing=True), 0.0),
        Check("entropy_final", 1, log_k - ents[-1], SMOOTH_GAP_TOL),
    ]
    return TheoryEntry("smooth_label_limit", checks, time.perf_counter() - t0,
                       {"taus": list(taus), "gaps": gaps.tolist(), "entropies": ents.tolist(),
                        "log_k": float(log_k), "label": y, "logits": z.tolist(), "seed": seed})


def sparse_path(t: float, num_classes: int = 2) -> np.ndarray:
    """``t * (1, -1, ..., -1)``: one logit dominates as ``t`` grows."""
    z = -np.full(num_classes, float(t))
    z[0] = t
    return z


def verify_regularizer(taus=REG_TAU_GRID, path=REG_SPARSE_PATH, seed: int = 0, trials: int = 1000,
                       k_range=K_RANGE, bound: float = REG_BOUND) -> TheoryEntry:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst_neg, worst_unit = 0.0, 0.0
    for _ in range(trials):
        k = int(rng.integers(k_range[0], k_range[1] + 1))
        z = rng.normal(0, LOGIT_STD, k)
        worst_neg = max(worst_neg, -float(regularizer_R(z, rng.uniform(*TAU_RANGE))))
        worst_unit = max(worst_unit, abs(float(regularizer_R(z, 1.0))))

    z_fixed = rng.normal(0, LOGIT_STD, SMOOTH_K)
    along_tau = np.array([float(regularizer_R(z_fixed, t)) for t in taus])
    sparse = np.array([float(regularizer_R(sparse_path(t), REG_SPARSE_TAU)) for t in path])
    axis = np.array([float(regularizer_R(np.eye(SMOOTH_K)[0] * t, REG_SPARSE_TAU)) for t in path])
    checks = [
        Check("nonnegative", trials, worst_neg, 0.0),
        Check("zero_at_tau_1", trials, worst_unit, 1e-12),
        Check("increasing_in_tau", len(taus), _monotone_violation(along_tau, increasing=True), 0.0),
        Check("exceeds_bound", 1, bound - along_tau[-1], 0.0),
        Check("sparse_path_decreasing", len(path), _monotone_violation(sparse, increasing=False), 0.0),
        Check("sparse_endpoint", 1, sparse[-1], REG_SPARSE_TOL),
        Check("axis_path_decreasing", len(path), _monotone_violation(axis, increasing=False), 0.0),
    ]
    return TheoryEntry("regularizer", checks, time.perf_counter() - t0,
                       {"taus": list(taus), "R_along_tau": along_tau.tolist(), "bound": bound,
                        "path": list(path), "sparse_tau": REG_SPARSE_TAU, "R_sparse": sparse.tolist(),
                        "R_axis": axis.tolist(), "seed": seed})


# ------------------------------------------------------------------ alignment

def _is_untrained(state) -> bool:
    from .model import init_model
    fresh = init_model(state.config)
    return all(np.array_equal(fresh.params[k], v) for k, v in state.params.items())


def verify_alignment(state=None, validation=None, kd_state=None, seed: int = 0,
                     trials: int = 100) -> TheoryEntry:
    """CKD loss vanishes exactly when the tempered posteriors agree.

    The analytic part always runs: equal logits (up to a shift) give zero loss
    and equal posteriors, and distinct posteriors give a positive loss. With a
    trained ``state`` and a ``validation`` split the mean Hellinger distance
    between the two views is recorded, and compared with ``kd_state`` if one
    is given. The empirical comparison is reported in ``details`` only.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst_loss, worst_post, worst_pos = 0.0, 0.0, -np.inf
    for _ in range(trials):
        k = int(rng.integers(K_RANGE[0], K_RANGE[1] + 1))
        tau = float(rng.uniform(*TAU_RANGE))
        z = rng.normal(0, LOGIT_STD, k)
        same = LogitPair(z, z + rng.normal(), 0, tau)
        worst_loss = max(worst_loss, abs(losses.ckd_loss(same)))
        p = softmax_with_temperature(same.z, tau)
        q = softmax_with_temperature(same.z_f, tau)
        worst_post = max(worst_post, float(np.abs(p - q).max()))
        z_f = z.copy()
        z_f[rng.integers(k)] += 1.0
        worst_pos = max(worst_pos, -losses.ckd_loss(LogitPair(z, z_f, 0, tau)))
    checks = [Check("zero_loss_at_equal_logits", trials, worst_loss, VALUE_TOL),
              Check("equal_posteriors", trials, worst_post, VALUE_TOL),
              Check("positive_when_distinct", trials, worst_pos, -1e-15)]
    details = {"seed": seed}
    if state is not None:
        if validation is None:
            raise ValueError("validation split required with a trained state")
        details["hellinger_ckd"] = _view_hellinger(state, validation)
        if kd_state is not None:
            details["hellinger_kd"] = _view_hellinger(kd_state, validation)
            details["ckd_closer"] = details["hellinger_ckd"] < details["hellinger_kd"]
    return TheoryEntry("alignment", checks, time.perf_counter() - t0, details)


def _view_hellinger(state, split) -> float:
    from .metrics import hellinger
    from .model import predict_logits
    if _is_untrained(state):
        raise ValueError("alignment needs a trained model, got freshly initialized parameters")
    ev = state.eval() if state.training else state
    p = softmax_with_temperature(predict_logits(ev, split.peri, "peri"))
    p_f = softmax_with_temperature(predict_logits(ev, split.face, "face"))
    return float(hellinger(p, p_f).mean())


# ------------------------------------------------------------------ landscape

@dataclass
class RegularizerGrid:
    axis: np.ndarray
    taus: tuple[float, ...]
    values: np.ndarray  # (len(taus), n, n); values[t, i, j] at z1=axis[i], z2=axis[j]

    def rows(self):
        for t, tau in enumerate(self.taus):
            for i, z1 in enumerate(self.axis):
                for j, z2 in enumerate(self.axis):
                    yield float(z1), float(z2), float(tau), float(self.values[t, i, j])

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["z1", "z2", "tau", "exp_neg_R"])
            for row in self.rows():
                w.writerow([repr(v) for v in row])
        return path

    def argmax_on_boundary(self) -> bool:
        n = len(self.axis)
        for plane in self.values:
            i, j = np.unravel_index(np.argmax(plane), plane.shape)
            if i not in (0, n - 1) and j not in (0, n - 1):
                return False
        return True

    def decreasing_in_tau(self) -> bool:
        return bool(np.all(np.diff(self.values, axis=0) < 0)) if len(self.taus) > 1 else True


def regularizer_grid(taus=GRID_TAUS, z_range=(-5.0, 5.0), resolution: int = 41) -> RegularizerGrid:
    """``exp(-R)`` for K=2 over a square logit grid, one plane per tau."""
    if resolution < 2:
        raise ValueError(f"resolution must be at least 2, got {resolution}")
    axis = np.linspace(z_range[0], z_range[1], resolution)
    z1, z2 = np.meshgrid(axis, axis, indexing="ij")
    z = np.stack([z1.ravel(), z2.ravel()], axis=1)
    values = np.stack([np.exp(-regularizer_R(z, tau)).reshape(resolution, resolution) for tau in taus])
    return RegularizerGrid(axis, tuple(float(t) for t in taus), values)


def verify_regularizer_grid(taus=GRID_TAUS, resolution: int = 41) -> TheoryEntry:
    t0 = time.perf_counter()
    grid = regularizer_grid(taus, resolution=resolution)
    checks = [Check("argmax_on_boundary", len(taus), 0.0 if grid.argmax_on_boundary() else 1.0, 0.0),
              Check("decreasing_in_tau", len(taus), 0.0 if grid.decreasing_in_tau() else 1.0, 0.0)]
    return TheoryEntry("regularizer_grid", checks, time.perf_counter() - t0,
                       {"taus": list(taus), "resolution": resolution})


def run_all(seed: int = 0, trials: int = 1000) -> TheoryReport:
    return TheoryReport([
        verify_lemma1(trials, seed=seed),
        verify_theorem1(trials, seed=seed),
        verify_smooth_label_limit(seed=seed),
        verify_regularizer(seed=seed, trials=trials),
        verify_regularizer_grid(),
        verify_alignment(seed=seed),
    ])
