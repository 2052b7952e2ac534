"""Deterministic SGD training for every ablation variant and baseline."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from . import losses
from .data import Dataset, Split
from .model import (ModelConfig, ModelState, apply_bn_stats, config_dict, forward_pair,
                    init_model, predict_logits)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VariantSpec:
    share_weights: bool
    share_batch_stats: bool
    objective: str  # class | f2p | ckd | no_reg | ml | kd
    views: tuple[str, ...] = ("peri", "face")


VARIANTS: dict[str, VariantSpec] = {
    "CE_FACE": VariantSpec(False, False, "class", ("face",)),
    "CE": VariantSpec(False, False, "class", ("peri",)),
    "CLASS_SW_SBS": VariantSpec(True, True, "class"),
    "F2P_SW_SBS": VariantSpec(True, True, "f2p"),
    "CKD_NO_SHARE": VariantSpec(False, False, "ckd"),
    "CKD_SW": VariantSpec(True, False, "ckd"),
    "CKD_FULL": VariantSpec(True, True, "ckd"),
    "KD_TWO_STAGE": VariantSpec(False, False, "kd"),
    "ML": VariantSpec(False, False, "ml"),
    # Label-smoothing part of the decomposed objective with the regularizer removed.
    "NO_REG_SW_SBS": VariantSpec(True, True, "no_reg"),
}

GRID_VARIANTS = ("CE_FACE", "CE", "CLASS_SW_SBS", "F2P_SW_SBS", "CKD_NO_SHARE", "CKD_SW",
                 "CKD_FULL", "KD_TWO_STAGE", "ML")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_factor: float = 0.1
    decay_epochs: tuple[int, ...] = (20, 40, 54)
    tau: float = 2.5
    variant: str = "CKD_FULL"
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])) or any(e >= self.epochs or e < 0 for e in d):
            raise ValueError(f"decay_epochs {d} must be strictly increasing and < epochs ({self.epochs})")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for batch norm")


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    n = sum(1 for e in config.decay_epochs if e <= epoch)
    return config.base_lr * config.lr_decay_factor ** n


def scaled_schedule(total: int, stage_epochs: int, decays: tuple[int, ...],
                    reference: int = 90) -> tuple[int, tuple[int, ...]]:
    """Rescale a stage length and its decay epochs from a ``reference`` budget."""
    f = total / reference
    epochs = max(1, round(stage_epochs * f))
    out: list[int] = []
    for d in decays:
        e = round(d * f)
        if 0 < e < epochs and (not out or e > out[-1]):
            out.append(e)
    return epochs, tuple(out)


def resolve_model_config(base: ModelConfig, variant: str, num_classes: int | None = None) -> ModelConfig:
    spec = VARIANTS[variant]
    kw = {"share_weights": spec.share_weights, "share_batch_stats": spec.share_batch_stats}
    if num_classes is not None:
        kw["num_classes"] = num_classes
    return replace(base, **kw)


def check_consistency(model_config: ModelConfig, train_config: TrainConfig) -> None:
    spec = VARIANTS[train_config.variant]
    if (model_config.share_weights, model_config.share_batch_stats) != (
            spec.share_weights, spec.share_batch_stats):
        raise ValueError(
            f"variant {train_config.variant} requires share_weights={spec.share_weights}, "
            f"share_batch_stats={spec.share_batch_stats}; model config has "
            f"{model_config.share_weights}/{model_config.share_batch_stats}")


def sgd_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               velocity: dict[str, np.ndarray], lr: float, momentum: float,
               weight_decay: float) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Heavy-ball SGD with L2 decay folded into the gradient."""
    new_params, new_vel = dict(params), dict(velocity)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for parameter {name!r}")
        p = params[name]
        v = momentum * velocity.get(name, np.zeros_like(p)) + (g + weight_decay * p)
        new_vel[name] = v
        new_params[name] = p - lr * v
    return new_params, new_vel


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Counter-based shuffle keyed by (seed, epoch)."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, epoch], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).permutation(n)


def _batches(perm: np.ndarray, batch_size: int):
    for start in range(0, len(perm), batch_size):
        idx = perm[start:start + batch_size]
        if len(idx) >= 2:
            yield idx


def _objective(spec: VariantSpec, out, labels, tau: float, teacher=None) -> ad.Tensor:
    kind = spec.objective
    if kind == "kd":
        return losses.kd_student_loss_t(out.z, teacher, labels, tau)
    if len(spec.views) == 1:
        return losses.ce_loss(out.logits[spec.views[0]], labels)
    z, z_f = out.z, out.z_f
    if kind == "class":
        return losses.classification_loss_t(z, z_f, labels)
    if kind == "f2p":
        return ad.add(losses.classification_loss_t(z, z_f, labels), losses.f2p_loss_t(z, z_f, tau))
    if kind == "ckd":
        return losses.full_loss_t(z, z_f, labels, tau)
    if kind == "no_reg":
        return losses.no_regularizer_loss_t(z, z_f, labels, tau)
    if kind == "ml":
        return losses.mutual_learning_loss_t(z, z_f, labels)
    raise ValueError(f"unknown objective {kind!r}")


def _groups_for(config: ModelConfig, views) -> set[str]:
    groups = set()
    for v in views:
        groups |= {"trunk" if config.share_weights else f"trunk_{v}", f"head_{v}", f"cls_{v}"}
    return groups


@dataclass
class TrainResult:
    state: ModelState
    log: list[dict]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


LOG_COLUMNS = ("stage", "epoch", "lr", "train_loss", "train_class_loss", "train_ckd_loss",
               "val_class_loss", "val_ckd_loss", "val_kl_f2p")


def _train_stage(state: ModelState, spec: VariantSpec, cfg: TrainConfig, train: Split,
                 val: Split | None, epochs: int, decays: tuple[int, ...], stage: str,
                 views_for_val: tuple[str, ...], teacher_logits: np.ndarray | None = None,
                 out_dir: Path | None = None, hash_: str = "") -> tuple[list[dict], dict]:
    stage_cfg = replace(cfg, epochs=epochs, decay_epochs=decays)
    trainable = _groups_for(state.config, spec.views)
    velocity: dict[str, np.ndarray] = {}
    rows = []
    for epoch in range(epochs):
        lr = lr_at_epoch(stage_cfg, epoch)
        perm = epoch_permutation(cfg.seed + (1000003 if stage == "student" else 0), epoch, len(train))
        tot = {"loss": 0.0, "class": 0.0, "ckd": 0.0, "n": 0}
        for idx in _batches(perm, cfg.batch_size):
            labels = train.labels[idx]
            kw = {}
            if "peri" in spec.views:
                kw["x_peri"] = train.peri[idx]
            if "face" in spec.views:
                kw["x_face"] = train.face[idx]
            out = forward_pair(state, trainable=trainable, **kw)
            teacher = teacher_logits[idx] if teacher_logits is not None else None
            loss = _objective(spec, out, labels, cfg.tau, teacher)
            grads = out.tape.backward(loss)
            named = {name: grads[t.node_id] for name, t in out.leaves.items()}
            state.params, velocity = sgd_update(state.params, named, velocity, lr,
                                                cfg.momentum, cfg.weight_decay)
            apply_bn_stats(state, out.bn_stats)
            b = len(idx)
            tot["loss"] += loss.item() * b
            cls = sum(float(losses.cross_entropy_np(z.data, labels).mean()) for z in out.logits.values())
            tot["class"] += cls * b
            if len(out.logits) == 2:
                zp, zf = out.z.data, out.z_f.data
                ckd = cfg.tau ** 2 * (losses.kl_np(zf, zp, cfg.tau) + losses.kl_np(zp, zf, cfg.tau)).mean()
                tot["ckd"] += float(ckd) * b
            tot["n"] += b
        if not np.isfinite(tot["loss"]):
            raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")
        n = max(tot["n"], 1)
        row = {"stage": stage, "epoch": epoch, "lr": lr, "train_loss": tot["loss"] / n,
               "train_class_loss": tot["class"] / n,
               "train_ckd_loss": tot["ckd"] / n if len(spec.views) == 2 else None,
               "val_class_loss": None, "val_ckd_loss": None, "val_kl_f2p": None}
        if val is not None and len(val):
            row.update(_validation(state, val, cfg.tau, views_for_val))
        rows.append(row)
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(Path(out_dir) / f"checkpoint_{stage}_e{epoch + 1:03d}.ckdc",
                            state, velocity, epoch, rows, hash_, cfg)
    return rows, velocity


def _validation(state: ModelState, val: Split, tau: float, views: tuple[str, ...]) -> dict:
    ev = state.eval()
    rec = {}
    z = predict_logits(ev, val.peri, "peri") if "peri" in views else None
    if z is not None:
        rec["val_class_loss"] = float(losses.cross_entropy_np(z, val.labels).mean())
    if "face" in views and z is not None:
        z_f = predict_logits(ev, val.face, "face")
        kl_fp = losses.kl_np(z_f, z, tau)
        rec["val_kl_f2p"] = float(kl_fp.mean())
        rec["val_ckd_loss"] = float(tau * tau * (kl_fp + losses.kl_np(z, z_f, tau)).mean())
    elif "face" in views:
        z_f = predict_logits(ev, val.face, "face")
        rec["val_class_loss"] = float(losses.cross_entropy_np(z_f, val.labels).mean())
    return rec


def run_hash(model_config: ModelConfig, train_config: TrainConfig) -> str:
    return ckpt_io.config_hash({"model": config_dict(model_config), "train": _train_dict(train_config)})


def _train_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["decay_epochs"] = list(cfg.decay_epochs)
    return d


def _check_dataset(model_config: ModelConfig, dataset: Dataset) -> tuple[Split, Split | None]:
    train = dataset["train"]
    if dataset.face_dim != model_config.face_dim or dataset.peri_dim != model_config.peri_dim:
        raise ValueError(f"dataset dims (face {dataset.face_dim}, peri {dataset.peri_dim}) do not match "
                         f"model config (face {model_config.face_dim}, peri {model_config.peri_dim})")
    if train.labels.max() >= model_config.num_classes:
        raise ValueError(f"dataset has label {train.labels.max()} but num_classes={model_config.num_classes}")
    return train, dataset.splits.get("validation")


def run_training(model_config: ModelConfig, train_config: TrainConfig, dataset: Dataset,
                 out_dir=None) -> TrainResult:
    """Train one variant. ``KD_TWO_STAGE`` is dispatched to :func:`run_two_stage_kd`."""
    check_consistency(model_config, train_config)
    if train_config.variant == "KD_TWO_STAGE":
        return run_two_stage_kd(model_config, train_config, dataset, out_dir)
    train, val = _check_dataset(model_config, dataset)
    spec = VARIANTS[train_config.variant]
    state = init_model(model_config)
    hash_ = run_hash(model_config, train_config)
    rows, velocity = _train_stage(state, spec, train_config, train, val, train_config.epochs,
                                  train_config.decay_epochs, "main", spec.views, out_dir=out_dir,
                                  hash_=hash_)
    _soft_monotonicity_check(rows, train_config)
    state.training = False
    result = TrainResult(state, rows, velocity)
    if out_dir is not None:
        _write_outputs(out_dir, result, hash_, train_config)
    return result


def run_two_stage_kd(model_config: ModelConfig, train_config: TrainConfig, dataset: Dataset,
                     out_dir=None) -> TrainResult:
    """Face teacher trained with CE, then a periocular student distilled from it.

    The returned state holds both branches (no sharing): the frozen teacher in
    the face slots and the student in the periocular slots.
    """
    check_consistency(model_config, train_config)
    train, val = _check_dataset(model_config, dataset)
    total = train_config.epochs
    t_epochs, t_decays = scaled_schedule(total, 50, (15, 30, 40))
    s_epochs, s_decays = scaled_schedule(total, 40, (10, 20, 30))
    state = init_model(model_config)
    hash_ = run_hash(model_config, train_config)

    teacher_spec = VariantSpec(False, False, "class", ("face",))
    rows, _ = _train_stage(state, teacher_spec, train_config, train, val, t_epochs, t_decays,
                           "teacher", ("face",), out_dir=out_dir, hash_=hash_)
    frozen = state.eval()
    teacher_logits = predict_logits(frozen, train.face, "face")

    student_spec = VariantSpec(False, False, "kd", ("peri",))
    rows2, velocity = _train_stage(state, student_spec, train_config, train, val, s_epochs, s_decays,
                                   "student", ("peri", "face"), teacher_logits=teacher_logits,
                                   out_dir=out_dir, hash_=hash_)
    state.training = False
    result = TrainResult(state, rows + rows2, velocity)
    if out_dir is not None:
        _write_outputs(out_dir, result, hash_, train_config)
    return result


def _soft_monotonicity_check(rows: list[dict], cfg: TrainConfig) -> bool:
    """5-epoch moving average of the training loss after the first LR decay."""
    if cfg.variant != "CKD_FULL" or not cfg.decay_epochs:
        return True
    vals = [r["train_loss"] for r in rows if r["epoch"] >= cfg.decay_epochs[0]]
    if len(vals) < 6:
        return True
    ma = np.convolve(vals, np.ones(5) / 5, mode="valid")
    ok = bool(np.all(np.diff(ma) <= 1e-9 * np.maximum(1.0, np.abs(ma[1:]))))
    if not ok:
        log.warning("training loss moving average increased after the first LR decay (%s)", cfg.variant)
    return ok


def save_checkpoint(path, state: ModelState, velocity: dict, epoch: int, rows: list[dict],
                    hash_: str, train_config: TrainConfig) -> Path:
    tensors = {f"param/{k}": v for k, v in state.params.items()}
    tensors.update({f"running/{k}": v for k, v in state.running.items()})
    tensors.update({f"velocity/{k}": v for k, v in velocity.items()})
    losses_seen = [r["train_loss"] for r in rows]
    meta = {"model": config_dict(state.config), "train": _train_dict(train_config),
            "epoch": epoch, "train_loss_mean": float(np.mean(losses_seen)) if losses_seen else None,
            "train_loss_last": losses_seen[-1] if losses_seen else None}
    return ckpt_io.save(ckpt_io.Checkpoint(hash_, meta, tensors), path)


def load_state(path, expected_hash: str | None = None) -> tuple[ModelState, TrainConfig, ckpt_io.Checkpoint]:
    c = ckpt_io.load(path, expected_hash)
    mc = dict(c.meta["model"])
    model_config = ModelConfig(**mc)
    tc = dict(c.meta["train"])
    train_config = TrainConfig(**tc)
    state = ModelState(model_config, c.group("param"), c.group("running"), training=False)
    return state, train_config, c


def write_log_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                        for k in LOG_COLUMNS})
    return path


def _write_outputs(out_dir, result: TrainResult, hash_: str, cfg: TrainConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_log_csv(result.log, out / "epoch_log.csv")
    last_epoch = result.log[-1]["epoch"] if result.log else -1
    save_checkpoint(out / "checkpoint.ckdc", result.state, result.velocity, last_epoch,
                    result.log, hash_, cfg)
