"""Metric learning of the patch representation.

Two affine layers are trained: a representation layer f (whose outputs
are what the memory bank and scorer consume) and a projection layer g
used only during training. Slowly updated EMA copies of both produce the
embeddings from which pairing weights are derived, decoupling the targets
from the parameters being optimized.

The loss attracts pairs in proportion to their pairing weight and repels
them with a hinge of margin m otherwise, on distances normalized per-row
by each point's mean distance to the batch. Gradients are analytic;
finite differences only appear in tests.
"""

import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (
    ConfigError,
    CorruptPayload,
    DimMismatch,
    EmptyDataset,
    GammaOutOfRange,
    IoFailure,
    KOutOfRange,
    NonFiniteValue,
    ShapeMismatch,
    VersionMismatch,
)
from .patch_features import PatchFeatureSet
from .similarity import SimilarityConfig, combined_similarity

EPS = 1e-12

_MAGIC = b"RCPM"
_VERSION = 1
# serialization order of the parameter blocks
_PARAM_KEYS = ("W_f", "b_f", "W_g", "b_g")


@dataclass
class TrainConfig:
    epochs: int = 120
    batch_size: int = 64
    lr: float = 1e-5
    weight_decay: float = 1e-2
    margin: float = 1.0
    gamma: float = 0.99
    d_f: int = 512
    d_g: int = 0  # 0 means "same as d_f"
    seed: int = 0
    sim: SimilarityConfig = field(default_factory=SimilarityConfig)

    @property
    def resolved_d_g(self) -> int:
        return self.d_g if self.d_g > 0 else self.d_f

    def validate(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(
                f"batch_size must be >= 2, got {self.batch_size}")
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(
                f"weight_decay must be >= 0, got {self.weight_decay}")
        if not self.margin > 0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.d_f < 1 or self.d_g < 0:
            raise ConfigError("d_f must be >= 1 and d_g >= 0")
        if self.sim.k > self.batch_size:
            raise KOutOfRange(
                f"similarity k={self.sim.k} exceeds batch_size="
                f"{self.batch_size}")
        self.sim.validate()

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "epochs", "batch_size", "lr", "weight_decay", "margin",
            "gamma", "d_f", "d_g", "seed")}
        d["sim"] = self.sim.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        sim = SimilarityConfig(**d.pop("sim", {}))
        return cls(sim=sim, **d)


@dataclass
class RepresentationModel:
    W_f: np.ndarray
    b_f: np.ndarray
    W_g: np.ndarray
    b_g: np.ndarray
    ema_W_f: np.ndarray
    ema_b_f: np.ndarray
    ema_W_g: np.ndarray
    ema_b_g: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.W_f.shape[0]

    @property
    def d_f(self) -> int:
        return self.W_f.shape[1]

    @property
    def d_g(self) -> int:
        return self.W_g.shape[1]

    def live(self) -> dict:
        return {k: getattr(self, k) for k in _PARAM_KEYS}

    def ema(self) -> dict:
        return {k: getattr(self, "ema_" + k) for k in _PARAM_KEYS}


def init_model(in_dim: int, d_f: int, d_g: int, rng) -> RepresentationModel:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases.

    EMA parameters start as exact copies of the live ones.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    lim_f = 1.0 / math.sqrt(in_dim)
    lim_g = 1.0 / math.sqrt(d_f)
    W_f = rng.uniform(-lim_f, lim_f, size=(in_dim, d_f))
    W_g = rng.uniform(-lim_g, lim_g, size=(d_f, d_g))
    b_f = np.zeros(d_f)
    b_g = np.zeros(d_g)
    return RepresentationModel(W_f, b_f, W_g, b_g,
                               W_f.copy(), b_f.copy(),
                               W_g.copy(), b_g.copy())


def _as_matrix(p) -> np.ndarray:
    if isinstance(p, PatchFeatureSet):
        p = p.vectors
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise DimMismatch(f"expected a 2-D feature matrix, got {p.shape}")
    return p


def forward_f(model: RepresentationModel, p, use_ema: bool = False):
    p = _as_matrix(p)
    if p.shape[1] != model.in_dim:
        raise DimMismatch(
            f"feature dim {p.shape[1]} != model input dim {model.in_dim}")
    W, b = (model.ema_W_f, model.ema_b_f) if use_ema else (model.W_f,
                                                           model.b_f)
    return p @ W + b


def forward_g(model: RepresentationModel, z_f, use_ema: bool = False):
    z_f = np.asarray(z_f, dtype=np.float64)
    if z_f.ndim != 2 or z_f.shape[1] != model.d_f:
        raise DimMismatch(
            f"projection input {z_f.shape} incompatible with d_f={model.d_f}")
    W, b = (model.ema_W_g, model.ema_b_g) if use_ema else (model.W_g,
                                                           model.b_g)
    return z_f @ W + b


def embed(model: RepresentationModel, p) -> np.ndarray:
    """Scoring-space embedding: live f output as float32.

    Bank construction and query scoring must both go through this one
    function so a test feature equal to a training feature reproduces its
    bank row bit-for-bit.
    """
    return forward_f(model, p).astype(np.float32)


def relative_distances(z) -> np.ndarray:
    """Distances normalized per-row by each point's mean distance.

    delta[i, j] = ||z_i - z_j|| / max(eps, mean_n ||z_i - z_n||).
    Not symmetric in general. Invariant under uniform positive scaling.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ShapeMismatch(f"need a 2-D batch with n >= 2, got {z.shape}")
    e = np.sqrt(np.maximum(kernels.pairwise_sqdist(z, z), 0.0))
    mu = e.mean(axis=1)
    return e / np.maximum(mu, EPS)[:, None]


def relaxed_contrastive_loss(z, w, m: float) -> float:
    """(1/N) * sum_ij [w * delta^2 + (1 - w) * max(m - delta, 0)^2]."""
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n = z.shape[0]
    if w.shape != (n, n):
        raise ShapeMismatch(f"weights {w.shape} do not match batch size {n}")
    if not m > 0:
        raise ConfigError(f"margin must be > 0, got {m}")
    delta = relative_distances(z)
    hinge = np.maximum(m - delta, 0.0)
    return float((w * delta ** 2 + (1.0 - w) * hinge ** 2).sum() / n)


def loss_gradients(model: RepresentationModel, p_batch, w, m: float) -> dict:
    """Analytic gradients of the loss w.r.t. the four live parameters.

    Chain: p -> z_f = p W_f + b_f -> z = z_f W_g + b_g -> pairwise
    distances e -> per-row normalized delta -> loss. The per-row mean in
    the delta denominator contributes a rank-one correction to each row
    of dL/de; rows whose mean distance is below eps are pinned to the
    eps-guard and get no denominator gradient.
    """
    p = _as_matrix(p_batch)
    if p.shape[1] != model.in_dim:
        raise DimMismatch(
            f"feature dim {p.shape[1]} != model input dim {model.in_dim}")
    w = np.asarray(w, dtype=np.float64)
    n = p.shape[0]
    if w.shape != (n, n):
        raise ShapeMismatch(f"weights {w.shape} do not match batch size {n}")

    z_f = p @ model.W_f + model.b_f
    z = z_f @ model.W_g + model.b_g

    e = np.sqrt(np.maximum(kernels.pairwise_sqdist(z, z), 0.0))
    mu = e.mean(axis=1)
    denom = np.maximum(mu, EPS)
    delta = e / denom[:, None]
    hinge = np.maximum(m - delta, 0.0)

    # dL/d(delta)
    A = (2.0 / n) * (w * delta - (1.0 - w) * hinge)
    # dL/d(e): direct term plus the row-mean denominator term
    row_corr = np.where(mu > EPS, (A * e).sum(axis=1) / (denom * denom), 0.0)
    B = A / denom[:, None] - (row_corr / n)[:, None]
    # dL/d(z) via d e_ij / d z_i = (z_i - z_j) / e_ij (zero at e_ij = 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        W_pair = np.where(e > 0.0, (B + B.T) / e, 0.0)
    G_z = W_pair.sum(axis=1)[:, None] * z - W_pair @ z

    G_zf = G_z @ model.W_g.T
    return {
        "W_g": z_f.T @ G_z,
        "b_g": G_z.sum(axis=0),
        "W_f": p.T @ G_zf,
        "b_f": G_zf.sum(axis=0),
    }


def ema_update(model: RepresentationModel, gamma: float) -> None:
    """theta_ema <- gamma * theta_ema + (1 - gamma) * theta, in place."""
    if not 0.0 <= gamma <= 1.0:
        raise GammaOutOfRange(f"gamma must be in [0, 1], got {gamma}")
    live = model.live()
    for key, tgt in model.ema().items():
        tgt *= gamma
        tgt += (1.0 - gamma) * live[key]


class AdamW:
    """Adam with decoupled weight decay, stepping a dict of parameters.

    Any object with this ``step`` signature can replace it in ``train``,
    which is the hook for plugging in other optimizers.
    """

    def __init__(self, params: dict, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float,
             weight_decay: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key, p in params.items():
            g = grads[key]
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p -= lr * (update + weight_decay * p)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine annealing from base_lr at step 0 toward 0 at total_steps."""
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def train(dataset, cfg: TrainConfig, optimizer=None) -> RepresentationModel:
    """Train f and g over the pooled patch features of all samples.

    Each step draws batch_size patch features uniformly at random
    (without replacement while the pool allows it), derives pairing
    weights from the EMA embeddings, and takes one optimizer step on the
    live parameters followed by an EMA update. Runs
    epochs * ceil(total / batch_size) steps. Fixed seed implies
    bit-reproducible output on a single thread.
    """
    cfg.validate()
    mats = [_as_matrix(ps) for ps in dataset]
    if not mats or sum(m.shape[0] for m in mats) == 0:
        raise EmptyDataset("no training patch features")
    dims = {m.shape[1] for m in mats}
    if len(dims) != 1:
        raise DimMismatch(f"mixed feature dims in training data: {dims}")
    X = mats[0] if len(mats) == 1 else np.concatenate(mats, axis=0)
    total = X.shape[0]

    rng = np.random.default_rng(cfg.seed)
    model = init_model(X.shape[1], cfg.d_f, cfg.resolved_d_g, rng)
    opt = optimizer if optimizer is not None else AdamW(model.live())

    n = cfg.batch_size
    steps_per_epoch = max(1, math.ceil(total / n))
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    for _ in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            idx = rng.choice(total, size=n, replace=total < n)
            batch = X[idx]
            z_bar = forward_g(model, forward_f(model, batch, use_ema=True),
                              use_ema=True)
            weights = combined_similarity(z_bar, cfg.sim)
            grads = loss_gradients(model, batch, weights, cfg.margin)
            opt.step(model.live(), grads,
                     cosine_lr(cfg.lr, step, total_steps), cfg.weight_decay)
            ema_update(model, cfg.gamma)
            step += 1
    return model


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def save_model(path, model: RepresentationModel, cfg: TrainConfig) -> None:
    """Binary checkpoint: magic, version, dims, eight float32 blocks
    (live then EMA, each W_f, b_f, W_g, b_g), JSON-echoed train config."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<IIII", _VERSION, model.in_dim, model.d_f,
                          model.d_g))
    for params in (model.live(), model.ema()):
        for key in _PARAM_KEYS:
            buf.write(np.ascontiguousarray(params[key],
                                           dtype="<f4").tobytes())
    trailer = json.dumps({"train_config": cfg.to_dict()},
                         sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(trailer)))
    buf.write(trailer)
    try:
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _block_shapes(in_dim: int, d_f: int, d_g: int) -> list:
    return [(in_dim, d_f), (d_f,), (d_f, d_g), (d_g,)]


def load_model(path):
    """Read a checkpoint; returns (model, train_config)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(raw) < 20 or raw[:4] != _MAGIC:
        raise VersionMismatch(f"{path}: not a model checkpoint")
    version, in_dim, d_f, d_g = struct.unpack_from("<IIII", raw, 4)
    if version != _VERSION:
        raise VersionMismatch(
            f"{path}: checkpoint version {version}, expected {_VERSION}")
    if min(in_dim, d_f, d_g) < 1:
        raise CorruptPayload(f"{path}: bad dims {(in_dim, d_f, d_g)}")

    off = 20
    blocks = []
    for _ in range(2):  # live then ema
        for shape in _block_shapes(in_dim, d_f, d_g):
            count = int(np.prod(shape))
            end = off + count * 4
            if end > len(raw):
                raise CorruptPayload(f"{path}: truncated parameter block")
            arr = np.frombuffer(raw[off:end], dtype="<f4").reshape(shape)
            if not np.isfinite(arr).all():
                raise NonFiniteValue(f"{path}: non-finite parameters")
            blocks.append(arr.astype(np.float64))
            off = end
    if len(raw) < off + 8:
        raise CorruptPayload(f"{path}: missing config trailer")
    (tlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if len(raw) != off + tlen:
        raise CorruptPayload(f"{path}: trailer length mismatch")
    try:
        trailer = json.loads(raw[off:].decode("utf-8"))
        cfg = TrainConfig.from_dict(trailer["train_config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptPayload(f"{path}: bad config trailer: {exc}") from exc
    return RepresentationModel(*blocks), cfg
