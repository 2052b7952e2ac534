"""Training objectives and their label-smoothing decomposition.

Batch losses take ``(B, K)`` logit tensors and integer labels and return the
batch mean as a scalar tensor on the same tape. The ``LogitPair`` helpers
evaluate a single sample and return plain floats; they route through the same
batch code so there is exactly one implementation of every formula.

Natural logarithms throughout. Entropy is ``H(p) = -sum p log p``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_TAU = 2.5


# ------------------------------------------------------------------ numpy helpers

def softmax_with_temperature(z, tau: float = 1.0) -> np.ndarray:
    """Softmax of ``z / tau`` along the last axis."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    s = np.asarray(z, dtype=np.float64) / tau
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_np(z, tau: float = 1.0) -> np.ndarray:
    s = np.asarray(z, dtype=np.float64) / tau
    m = s.max(axis=-1, keepdims=True)
    return s - m - np.log(np.exp(s - m).sum(axis=-1, keepdims=True))


def entropy(p, axis: int = -1) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def smooth_label(y: int, p_tau, tau: float) -> np.ndarray:
    """Convex mix ``(onehot(y) + tau * p_tau) / (1 + tau)``."""
    if tau < 0:
        raise ValueError(f"temperature must be non-negative, got {tau}")
    p_tau = np.asarray(p_tau, dtype=np.float64)
    y_vec = np.zeros_like(p_tau)
    y_vec[..., y] = 1.0
    return (y_vec + tau * p_tau) / (1.0 + tau)


def cross_entropy_np(z, labels) -> np.ndarray:
    """Per-row ``-log softmax(z)[y]``."""
    ls = log_softmax_np(z)
    return -ls[np.arange(len(ls)), np.asarray(labels, dtype=np.int64)]


def kl_np(target_logits, logits, tau: float = 1.0) -> np.ndarray:
    """Per-row ``KL(softmax(t/tau) || softmax(z/tau))``."""
    lt = log_softmax_np(target_logits, tau)
    return (np.exp(lt) * (lt - log_softmax_np(logits, tau))).sum(axis=-1)


def regularizer_R(z, tau: float) -> np.ndarray:
    """Sparsity-oriented regularizer ``tau * lse(z / tau) - lse(z)``.

    Evaluated as ``tau * log1p(r_tau) - log1p(r_1)`` where ``r`` sums
    ``exp((z_k - max z) / t)`` over every entry except one maximal one. The
    remainders are passed to ``log1p`` directly, which keeps full relative
    precision near the sparse limit, and the result is exactly 0 at
    ``tau == 1``.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(z, dtype=np.float64)
    d = z - z.max(axis=-1, keepdims=True)
    top = np.expand_dims(d.argmax(axis=-1), -1)

    def remainder(t):
        e = np.exp(d / t)
        np.put_along_axis(e, top, 0.0, axis=-1)
        return e.sum(axis=-1)

    return tau * np.log1p(remainder(tau)) - np.log1p(remainder(1.0))


# ------------------------------------------------------------------ tape losses

def _onehot_const(labels, num_classes: int) -> Tensor:
    return ad.constant(one_hot(labels, num_classes))


def cross_entropy_rows(target, log_q: Tensor) -> Tensor:
    """Per-row ``-sum_k target_k log q_k`` as a ``(B, 1)`` tensor."""
    return ad.scale(ad.reduce_sum(ad.mul(target, log_q), axis=-1, keepdims=True), -1.0)


def kl_rows(target_logits: Tensor, logits: Tensor, tau: float) -> Tensor:
    """Per-row ``KL(sg(softmax(t/tau)) || softmax(z/tau))`` as ``(B, 1)``."""
    t = ad.stop_gradient(target_logits)
    log_pt = ad.log_softmax(t, tau)
    pt = ad.softmax(t, tau)
    log_q = ad.log_softmax(logits, tau)
    return ad.reduce_sum(ad.mul(pt, ad.sub(log_pt, log_q)), axis=-1, keepdims=True)


def ce_loss(z: Tensor, labels) -> Tensor:
    """Mean cross-entropy at temperature 1 for one view."""
    y = _onehot_const(labels, z.shape[-1])
    return ad.reduce_mean(cross_entropy_rows(y, ad.log_softmax(z)))


def classification_loss_t(z: Tensor, z_f: Tensor, labels) -> Tensor:
    """Two-view classification loss; each view averaged separately."""
    return ad.add(ce_loss(z, labels), ce_loss(z_f, labels))


def f2p_loss_t(z: Tensor, z_f: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """One-way face-to-periocular term ``tau^2 KL(sg(p^F_tau) || p_tau)``."""
    return ad.scale(ad.reduce_mean(kl_rows(z_f, z, tau)), tau * tau)


def ckd_loss_t(z: Tensor, z_f: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """Bidirectional consistency loss with stop-gradient on each target."""
    both = ad.add(kl_rows(z_f, z, tau), kl_rows(z, z_f, tau))
    return ad.scale(ad.reduce_mean(both), tau * tau)


def full_loss_t(z: Tensor, z_f: Tensor, labels, tau: float = DEFAULT_TAU) -> Tensor:
    return ad.add(classification_loss_t(z, z_f, labels), ckd_loss_t(z, z_f, tau))


def regularizer_t(z: Tensor, tau: float) -> Tensor:
    """Per-row regularizer ``(B, 1)`` on the tape."""
    lse_tau = ad.scale(ad.logsumexp(ad.scale(z, 1.0 / tau)), tau)
    return ad.sub(lse_tau, ad.logsumexp(z))


def smooth_targets_t(z: Tensor, labels, tau: float) -> Tensor:
    """Detached smooth labels built from the *other* view's logits ``z``."""
    y = one_hot(labels, z.shape[-1])
    p_tau = ad.softmax(ad.stop_gradient(z), tau)
    return ad.scale(ad.add(ad.constant(y), ad.scale(p_tau, tau)), 1.0 / (1.0 + tau))


def smoothing_part_t(z: Tensor, z_f: Tensor, labels, tau: float) -> Tensor:
    """``H(y~, p^F) + H(y~^F, p)`` averaged over the batch (labels detached)."""
    y_s = smooth_targets_t(z, labels, tau)
    y_s_f = smooth_targets_t(z_f, labels, tau)
    rows = ad.add(cross_entropy_rows(y_s, ad.log_softmax(z_f)),
                  cross_entropy_rows(y_s_f, ad.log_softmax(z)))
    return ad.reduce_mean(rows)


def decomposed_objective_t(z: Tensor, z_f: Tensor, labels, tau: float = DEFAULT_TAU) -> Tensor:
    """Smoothing part plus ``tau/(1+tau) * (R(z^F) + R(z))``."""
    reg = ad.reduce_mean(ad.add(regularizer_t(z_f, tau), regularizer_t(z, tau)))
    return ad.add(smoothing_part_t(z, z_f, labels, tau), ad.scale(reg, tau / (1.0 + tau)))


def no_regularizer_loss_t(z: Tensor, z_f: Tensor, labels, tau: float = DEFAULT_TAU) -> Tensor:
    """Label smoothing without the regularizer, on the same ``(1+tau)`` scale as the full loss."""
    return ad.scale(smoothing_part_t(z, z_f, labels, tau), 1.0 + tau)


def kd_student_loss_t(z: Tensor, teacher_logits, labels, tau: float = DEFAULT_TAU) -> Tensor:
    """Vanilla distillation: CE plus ``tau^2 KL(teacher_tau || student_tau)``."""
    return ad.add(ce_loss(z, labels), f2p_loss_t(z, ad.as_tensor(teacher_logits), tau))


def mutual_learning_loss_t(z: Tensor, z_f: Tensor, labels) -> Tensor:
    """Deep mutual learning: each view CE plus KL to the other's posterior, tau = 1."""
    kl = ad.add(kl_rows(z_f, z, 1.0), kl_rows(z, z_f, 1.0))
    return ad.add(classification_loss_t(z, z_f, labels), ad.reduce_mean(kl))


# ------------------------------------------------------------------ per-sample API

@dataclass(frozen=True)
class LogitPair:
    z: np.ndarray
    z_f: np.ndarray
    y: int
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64).reshape(-1)
        z_f = np.asarray(self.z_f, dtype=np.float64).reshape(-1)
        if z.shape != z_f.shape or z.size < 2:
            raise ValueError(f"logit vectors must share a length >= 2, got {z.shape} and {z_f.shape}")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(z_f))):
            raise ValueError("logits must be finite")
        if not 0 <= int(self.y) < z.size:
            raise ValueError(f"label {self.y} outside [0, {z.size})")
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "z_f", z_f)
        object.__setattr__(self, "y", int(self.y))

    @property
    def num_classes(self) -> int:
        return self.z.size


@dataclass(frozen=True)
class PosteriorPair:
    p_tau: np.ndarray
    pF_tau: np.ndarray
    p: np.ndarray
    p_f: np.ndarray

    @classmethod
    def from_logits(cls, pair: LogitPair) -> PosteriorPair:
        return cls(softmax_with_temperature(pair.z, pair.tau),
                   softmax_with_temperature(pair.z_f, pair.tau),
                   softmax_with_temperature(pair.z), softmax_with_temperature(pair.z_f))


def _pair_value(fn, pair: LogitPair, **kw) -> float:
    tape = ad.Tape()
    z = tape.variable(pair.z[None, :])
    z_f = tape.variable(pair.z_f[None, :])
    return fn(z, z_f, **kw).item()


def classification_loss(pair: LogitPair) -> float:
    return _pair_value(classification_loss_t, pair, labels=[pair.y])


def ckd_loss(pair: LogitPair) -> float:
    return _pair_value(ckd_loss_t, pair, tau=pair.tau)


def f2p_loss(pair: LogitPair) -> float:
    return _pair_value(f2p_loss_t, pair, tau=pair.tau)


def full_loss(pair: LogitPair) -> float:
    return _pair_value(full_loss_t, pair, labels=[pair.y], tau=pair.tau)


def decomposed_objective(pair: LogitPair) -> float:
    return _pair_value(decomposed_objective_t, pair, labels=[pair.y], tau=pair.tau)


def theorem1_residual(pair: LogitPair) -> float:
    """Residual of ``L_full + tau^2 (H(p^F_tau) + H(p_tau)) = (1+tau) * decomposed``."""
    post = PosteriorPair.from_logits(pair)
    tau = pair.tau
    lhs = full_loss(pair) + tau * tau * (entropy(post.pF_tau) + entropy(post.p_tau))
    return abs(float(lhs - (1.0 + tau) * decomposed_objective(pair)))


def pair_gradients(fn, pair: LogitPair, **kw) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of a batch loss w.r.t. ``(z, z_F)`` for a single sample."""
    tape = ad.Tape()
    z = tape.variable(pair.z[None, :])
    z_f = tape.variable(pair.z_f[None, :])
    grads = tape.backward(fn(z, z_f, **kw))
    return grads[z.node_id][0], grads[z_f.node_id][0]
