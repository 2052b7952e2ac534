"""Two-view network: dense trunk with optional shared weights and shared
batch statistics, separate projection heads and classifiers per view.

Parameter names are namespaced by branch. With shared weights the trunk is a
single ``trunk`` group used by both views; otherwise there are ``trunk_peri``
and ``trunk_face``. Heads (``head_peri``/``head_face``) and classifiers
(``cls_peri``/``cls_face``) are always separate.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VIEWS = ("peri", "face")
BN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    face_dim: int = 64
    peri_dim: int = 32
    trunk_widths: tuple[int, ...] = (64, 64, 64)
    head_width: int = 64
    embed_dim: int = 32
    num_classes: int = 64
    share_weights: bool = True
    share_batch_stats: bool = True
    bn_momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "trunk_widths", tuple(int(w) for w in self.trunk_widths))
        if self.face_dim < 1 or self.peri_dim < 1:
            raise ValueError("input dims must be positive")
        if self.peri_dim > self.face_dim:
            raise ValueError("periocular inputs are zero-padded to face_dim, so peri_dim <= face_dim")
        if not self.trunk_widths or min(self.trunk_widths) < 1:
            raise ValueError("trunk_widths must be a non-empty list of positive ints")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.share_batch_stats and not self.share_weights:
            raise ValueError("share_batch_stats requires share_weights")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ValueError("bn_momentum must lie in (0, 1)")


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    running: dict[str, np.ndarray] = field(default_factory=dict)
    training: bool = True

    def copy(self) -> ModelState:
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.running.items()}, self.training)

    def eval(self) -> ModelState:
        s = self.copy()
        s.training = False
        return s

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for store in (self.params, self.running):
            for k in sorted(store):
                h.update(k.encode())
                h.update(np.ascontiguousarray(store[k], dtype="<f8").tobytes())
        return h.hexdigest()


def trunk_group(config: ModelConfig, view: str) -> str:
    return "trunk" if config.share_weights else f"trunk_{view}"


def stats_key(config: ModelConfig, layer: str, view: str) -> str:
    """Running-statistics slot for a batch-norm layer as seen by ``view``."""
    if layer.startswith("trunk") and config.share_weights:
        return layer if config.share_batch_stats else f"{layer}@{view}"
    return layer


def _layer_names(config: ModelConfig):
    """Yield (linear-or-bn layer prefix, fan_in, fan_out, has_bn) per block."""
    blocks = []
    groups = ["trunk"] if config.share_weights else ["trunk_peri", "trunk_face"]
    for g in groups:
        fan_in = config.face_dim
        for i, w in enumerate(config.trunk_widths):
            blocks.append((f"{g}.{i}", fan_in, w, True))
            fan_in = w
    last = config.trunk_widths[-1]
    for view in VIEWS:
        blocks.append((f"head_{view}.0", last, config.head_width, True))
        blocks.append((f"head_{view}.embed", config.head_width, config.embed_dim, False))
        blocks.append((f"cls_{view}", config.embed_dim, config.num_classes, False))
    return blocks


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # Keyed per parameter so each branch's init is independent of the others.
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def init_model(config: ModelConfig) -> ModelState:
    """Fan-in scaled Gaussian weights, zero biases, unit BN scale, zero shift."""
    params: dict[str, np.ndarray] = {}
    running: dict[str, np.ndarray] = {}
    for name, fan_in, fan_out, has_bn in _layer_names(config):
        rng = _param_rng(config.seed, name + ".weight")
        params[name + ".weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))
        params[name + ".bias"] = np.zeros(fan_out)
        if has_bn:
            params[name + ".gamma"] = np.ones(fan_out)
            params[name + ".beta"] = np.zeros(fan_out)
            for view in VIEWS:
                key = stats_key(config, name, view)
                running[key + ".mean"] = np.zeros(fan_out)
                running[key + ".var"] = np.ones(fan_out)
    return ModelState(config, params, running, training=True)


# ------------------------------------------------------------------ batch norm

@dataclass
class BatchNormLayer:
    gamma: np.ndarray | Tensor
    beta: np.ndarray | Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("epsilon must be positive")


def _normalize_train(x: Tensor, eps: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    rows = x.shape[0]
    if rows < 2:
        raise ValueError(f"batch norm over channels 0..{x.shape[1] - 1} needs >= 2 rows "
                         f"per statistics group in training mode, got {rows}")
    mu = ad.reduce_mean(x, axis=0, keepdims=True)
    centered = ad.sub(x, mu)
    var = ad.reduce_mean(ad.mul(centered, centered), axis=0, keepdims=True)
    inv_std = ad.exp(ad.scale(ad.log(ad.add(var, eps)), -0.5))
    return ad.mul(centered, inv_std), mu.data.reshape(-1), var.data.reshape(-1)


def _affine(x: Tensor, layer: BatchNormLayer) -> Tensor:
    return ad.add(ad.mul(x, layer.gamma), layer.beta)


def shared_batch_normalize(batch_p, batch_f, layer: BatchNormLayer, sbs: bool, training: bool,
                           layer_f: BatchNormLayer | None = None):
    """Normalize a periocular/face batch pair.

    With ``sbs`` the statistics come from the 2B-row concatenation; otherwise
    each view uses its own (``layer_f`` carries the face running stats, if
    different). Returns ``(out_p, out_f, stats)`` where ``stats`` maps
    ``"shared"``/``"peri"``/``"face"`` to the ``(mean, biased var, rows)``
    batch statistics used, empty in eval mode.
    """
    batch_p, batch_f = ad.as_tensor(batch_p), ad.as_tensor(batch_f)
    if batch_p.shape[1] != batch_f.shape[1]:
        raise ad.ShapeError("shared_batch_normalize", batch_p.shape, batch_f.shape)
    layer_f = layer_f or layer
    stats = {}
    if not training:
        return (_eval_norm(batch_p, layer), _eval_norm(batch_f, layer_f), stats)
    if sbs:
        b = batch_p.shape[0]
        both = ad.concat_rows(batch_p, batch_f)
        normed, mu, var = _normalize_train(both, layer.eps)
        stats["shared"] = (mu, var, both.shape[0])
        out = _affine(normed, layer)
        return ad.slice_rows(out, 0, b), ad.slice_rows(out, b, out.shape[0]), stats
    out = []
    for view, x, lay in (("peri", batch_p, layer), ("face", batch_f, layer_f)):
        normed, mu, var = _normalize_train(x, lay.eps)
        stats[view] = (mu, var, x.shape[0])
        out.append(_affine(normed, lay))
    return out[0], out[1], stats


def _eval_norm(x: Tensor, layer: BatchNormLayer) -> Tensor:
    inv_std = 1.0 / np.sqrt(layer.running_var + layer.eps)
    shifted = ad.sub(x, layer.running_mean[None, :])
    return _affine(ad.mul(shifted, inv_std[None, :]), layer)


def update_running(running_mean: np.ndarray, running_var: np.ndarray, mu: np.ndarray,
                   var: np.ndarray, rows: int, momentum: float) -> tuple[np.ndarray, np.ndarray]:
    """Exponential moving average; the stored variance is the unbiased estimate."""
    unbiased = var * rows / (rows - 1)
    return (momentum * running_mean + (1 - momentum) * mu,
            momentum * running_var + (1 - momentum) * unbiased)


# ------------------------------------------------------------------ forward

@dataclass
class ForwardResult:
    logits: dict[str, Tensor]
    embeddings: dict[str, Tensor]
    leaves: dict[str, Tensor]
    bn_stats: dict[str, tuple[np.ndarray, np.ndarray, int]]
    tape: ad.Tape

    @property
    def z(self) -> Tensor: return self.logits["peri"]
    @property
    def z_f(self) -> Tensor: return self.logits["face"]
    @property
    def u(self) -> Tensor: return self.embeddings["peri"]
    @property
    def u_f(self) -> Tensor: return self.embeddings["face"]


def pad_peri(x: np.ndarray, face_dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] == face_dim:
        return x
    out = np.zeros((x.shape[0], face_dim))
    out[:, :x.shape[1]] = x
    return out


class _Builder:
    def __init__(self, state: ModelState, tape: ad.Tape, trainable: set[str] | None):
        self.state, self.tape, self.cfg = state, tape, state.config
        self.leaves: dict[str, Tensor] = {}
        self.bn_stats: dict[str, tuple] = {}
        self.trainable = trainable

    def p(self, name: str):
        if name not in self.leaves:
            grad = self.trainable is None or name.split(".")[0] in self.trainable
            if grad:
                self.leaves[name] = self.tape.variable(self.state.params[name])
            else:
                return ad.constant(self.state.params[name])
        return self.leaves[name]

    def linear(self, x, name):
        return ad.add(ad.matmul(x, self.p(name + ".weight")), self.p(name + ".bias"))

    def bn_layer(self, name, view) -> BatchNormLayer:
        key = stats_key(self.cfg, name, view)
        return BatchNormLayer(self.p(name + ".gamma"), self.p(name + ".beta"),
                              self.state.running[key + ".mean"], self.state.running[key + ".var"])

    def block_single(self, x, name, view):
        h = self.linear(x, name)
        layer = self.bn_layer(name, view)
        if self.state.training:
            normed, mu, var = _normalize_train(h, layer.eps)
            self.bn_stats[stats_key(self.cfg, name, view)] = (mu, var, h.shape[0])
            out = _affine(normed, layer)
        else:
            out = _eval_norm(h, layer)
        return ad.relu(out)

    def block_pair(self, xp, xf, name):
        hp, hf = self.linear(xp, name), self.linear(xf, name)
        sbs = self.cfg.share_batch_stats
        out_p, out_f, stats = shared_batch_normalize(
            hp, hf, self.bn_layer(name, "peri"), sbs, self.state.training,
            layer_f=self.bn_layer(name, "face"))
        for view, st in stats.items():
            key = name if view == "shared" else stats_key(self.cfg, name, view)
            self.bn_stats[key] = st
        return ad.relu(out_p), ad.relu(out_f)


def forward_pair(state: ModelState, x_peri=None, x_face=None,
                 trainable: set[str] | None = None, tape: ad.Tape | None = None) -> ForwardResult:
    """Run one or both views through the network.

    ``trainable`` restricts which parameter groups (``trunk``, ``head_face``,
    ...) become gradient leaves; the rest enter as constants.
    """
    cfg = state.config
    tape = tape or ad.Tape()
    b = _Builder(state, tape, trainable)
    inputs = {}
    if x_peri is not None:
        x_peri = np.asarray(x_peri, dtype=np.float64)
        if x_peri.ndim != 2 or x_peri.shape[1] != cfg.peri_dim:
            raise ad.ShapeError("forward_pair (periocular input)", x_peri.shape, (None, cfg.peri_dim))
        inputs["peri"] = ad.constant(pad_peri(x_peri, cfg.face_dim))
    if x_face is not None:
        x_face = np.asarray(x_face, dtype=np.float64)
        if x_face.ndim != 2 or x_face.shape[1] != cfg.face_dim:
            raise ad.ShapeError("forward_pair (face input)", x_face.shape, (None, cfg.face_dim))
        inputs["face"] = ad.constant(x_face)
    if not inputs:
        raise ValueError("forward_pair needs at least one view")

    h = dict(inputs)
    paired = cfg.share_weights and len(inputs) == 2
    for i in range(len(cfg.trunk_widths)):
        if paired:
            h["peri"], h["face"] = b.block_pair(h["peri"], h["face"], f"trunk.{i}")
        else:
            for view in h:
                h[view] = b.block_single(h[view], f"{trunk_group(cfg, view)}.{i}", view)

    logits, embeds = {}, {}
    for view, x in h.items():
        x = b.block_single(x, f"head_{view}.0", view)
        u = b.linear(x, f"head_{view}.embed")
        embeds[view] = u
        logits[view] = b.linear(u, f"cls_{view}")
    return ForwardResult(logits, embeds, b.leaves, b.bn_stats, tape)


def apply_bn_stats(state: ModelState, stats: dict) -> None:
    """Fold the batch statistics of a training forward into the running stats."""
    m = state.config.bn_momentum
    for key, (mu, var, rows) in stats.items():
        state.running[key + ".mean"], state.running[key + ".var"] = update_running(
            state.running[key + ".mean"], state.running[key + ".var"], mu, var, rows, m)


def embed(state: ModelState, x, view: str = "peri", batch_size: int = 512) -> np.ndarray:
    """Eval-mode embeddings from one view; classifier is not applied."""
    if state.training:
        raise RuntimeError("embed requires an eval-mode state (running statistics)")
    return _eval_outputs(state, x, view, batch_size)[0]


def predict_logits(state: ModelState, x, view: str = "peri", batch_size: int = 512) -> np.ndarray:
    if state.training:
        raise RuntimeError("predict_logits requires an eval-mode state")
    return _eval_outputs(state, x, view, batch_size)[1]


def _eval_outputs(state, x, view, batch_size):
    if view not in VIEWS:
        raise ValueError(f"unknown view {view!r}")
    x = np.asarray(x, dtype=np.float64)
    us, zs = [], []
    for start in range(0, len(x), batch_size):
        chunk = x[start:start + batch_size]
        kw = {"x_peri": chunk} if view == "peri" else {"x_face": chunk}
        out = forward_pair(state, trainable=set(), **kw)
        us.append(out.embeddings[view].data)
        zs.append(out.logits[view].data)
    e = state.config.embed_dim
    k = state.config.num_classes
    return (np.concatenate(us) if us else np.zeros((0, e)),
            np.concatenate(zs) if zs else np.zeros((0, k)))


def config_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["trunk_widths"] = list(config.trunk_widths)
    return d
