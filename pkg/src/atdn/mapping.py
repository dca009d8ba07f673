"""Image autoencoder whose bottleneck vector serves as a keyframe embedding.

Training combines reconstruction, an optional KL term for the variational
bottleneck and the embedding distance loss (EDL), which asks ratios of
consecutive embedding distances to match ratios of consecutive camera
position distances.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import relative, rotation_angle
from .tensor import autograd as ag
from .tensor.autograd import Tensor, no_grad
from .tensor.nn import Conv2d, Linear, Module
from .tensor.optim import AdamW, Schedule, cosine_lr
from .tensor.rng import seeded_rng

log = logging.getLogger(__name__)

EDL_EPS = 1e-8
LOGVAR_MAX = 20.0


class MapTrainingFault(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def dim(self):
        return self.values.shape[0]


# ------------------------------------------------------------------ model

@dataclass(frozen=True)
class MapConfig:
    input_size: int = 64
    channels: tuple = (8, 16, 32)
    latent_dim: int = 128
    variational: bool = True
    unet: bool = True
    skip_channels: int = 4


class MapOutput(NamedTuple):
    recon: Tensor
    mean: Tensor
    logvar: Tensor
    z: Tensor


class MapModel(Module):
    """Conv encoder -> (mean, logvar) heads -> conv decoder.

    With ``unet`` on, every decoder level below full resolution also receives
    a feature map projected from the latent code. The skips start at the
    bottleneck, so the embedding still carries everything the decoder sees.
    """

    def __init__(self, config=MapConfig(), seed=0, dtype=np.float32):
        rng = seeded_rng(seed)
        n = len(config.channels)
        if config.input_size % (1 << n):
            raise ValueError(f"input size must be divisible by {1 << n}")
        self.config = config
        self.variational = config.variational
        chans = (1,) + tuple(config.channels)
        self.enc = [Conv2d(chans[i], chans[i + 1], 3, rng, stride=2, padding=1, dtype=dtype)
                    for i in range(n)]
        self.bottom = config.input_size >> n
        flat = chans[-1] * self.bottom ** 2
        d = config.latent_dim
        self.mean_head = Linear(flat, d, rng, dtype=dtype)
        self.logvar_head = Linear(flat, d, rng, zero_init=True, dtype=dtype)
        self.dec_in = Linear(d, flat, rng, dtype=dtype)
        self.dec, self.skips = [], []
        for level in range(n):
            c_in = chans[n - level]
            c_out = chans[n - level - 1]
            size = self.bottom << (level + 1)
            use_skip = config.unet and level < n - 1
            if use_skip:
                self.skips.append(Linear(d, config.skip_channels * size * size, rng, dtype=dtype))
                c_in += config.skip_channels
            self.dec.append(Conv2d(c_in, c_out, 3, rng, padding=1, dtype=dtype))

    def encode_stats(self, x):
        for conv in self.enc:
            x = conv(x).relu()
        x = x.reshape(x.shape[0], -1)
        return self.mean_head(x), self.logvar_head(x)

    def decode(self, z):
        c = self.config.channels[-1]
        x = self.dec_in(z).relu().reshape(z.shape[0], c, self.bottom, self.bottom)
        last = len(self.dec) - 1
        for level, conv in enumerate(self.dec):
            x = ag.upsample2x(x)
            if level < len(self.skips):
                size = x.shape[-1]
                s = self.skips[level](z).reshape(z.shape[0], -1, size, size)
                x = ag.concat([x, s], axis=1)
            x = conv(x)
            x = x.sigmoid() if level == last else x.relu()
        return x

    def forward(self, x, rng=None, variational=None):
        variational = self.variational if variational is None else variational
        mean, logvar = self.encode_stats(x)
        if variational:
            if rng is None:
                raise ValueError("variational forward pass needs an rng")
            xi = rng.standard_normal(mean.shape).astype(mean.dtype)
            z = mean + ag.exp(ag.clip(logvar, None, LOGVAR_MAX) * 0.5) * Tensor(xi)
        else:
            z = mean
        return MapOutput(self.decode(z), mean, logvar, z)


def _image_batch(model, images):
    a = np.asarray(images)
    size = model.config.input_size
    if a.shape[-2:] != (size, size):
        raise ValueError(f"image is {a.shape[-2:]}, model expects {(size, size)}")
    return a.reshape(-1, 1, size, size).astype(model.mean_head.weight.dtype)


def encode(model, image, frame_id=0, rng=None, variational=False):
    """Embed one image. Deterministic (mean head) unless ``variational``."""
    x = Tensor(_image_batch(model, image)[:1])
    with no_grad():
        mean, logvar = model.encode_stats(x)
    values = mean.data[0]
    if variational:
        if rng is None:
            raise ValueError("variational encoding needs an rng")
        sigma = np.exp(0.5 * np.minimum(logvar.data[0], LOGVAR_MAX))
        values = values + sigma * rng.standard_normal(values.shape).astype(values.dtype)
    return Embedding(values, frame_id)


# ------------------------------------------------------------------ losses

def edl(embeddings, positions, eps=EDL_EPS, stride=1, frame_ids=None):
    """Mean over triples (i, i+s, i+2s) of the distance-ratio mismatch."""
    if isinstance(embeddings, Tensor):
        e = embeddings
    else:
        e = Tensor(np.stack([x.values if isinstance(x, Embedding) else np.asarray(x) for x in embeddings]))
    e = e.reshape(e.shape[0], -1)
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = e.shape[0]
    if n != len(p):
        raise ValueError("embeddings and positions differ in length")
    if frame_ids is not None and np.any(np.diff(np.asarray(frame_ids)) <= 0):
        raise ValueError("frame order must be strictly increasing")
    if n < 2 * stride + 1:
        raise ValueError(f"edl needs at least {2 * stride + 1} embeddings (got {n})")
    i = np.arange(n - 2 * stride)
    d1 = ag.norm(e[i] - e[i + stride], axis=-1)
    d2 = ag.norm(e[i + 2 * stride] - e[i + stride], axis=-1)
    p1 = np.linalg.norm(p[i] - p[i + stride], axis=-1)
    p2 = np.linalg.norm(p[i + 2 * stride] - p[i + stride], axis=-1)
    target = Tensor((p1 / (p2 + eps)).astype(e.dtype))
    return ag.abs_(d1 / (d2 + eps) - target).mean()


def kl_term(mean, logvar):
    """Batch mean of KL(N(mean, exp(logvar)) || N(0, I))."""
    per = (1.0 + logvar - mean * mean - ag.exp(logvar)).sum(axis=-1) * -0.5
    return per.mean()


@dataclass(frozen=True)
class MapTrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    beta_kl: float = 1e-3
    lambda_edl: float = 1.0
    edl_only: bool = False
    seed: int = 0
    triple_stride: int = 1
    max_faults: int = 10

    def __post_init__(self):
        if self.beta_kl < 0 or self.lambda_edl < 0:
            raise ValueError("loss weights must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.lambda_edl > 0 and self.batch_size < 2 * self.triple_stride + 1:
            raise ValueError("batch too small to form an edl triple")


def map_loss(model, images, positions, cfg=MapTrainConfig(), rng=None, variational=None):
    """Total loss and a dict of its components for one window of keyframes."""
    x = Tensor(_image_batch(model, images))
    if cfg.lambda_edl > 0 and x.shape[0] < 2 * cfg.triple_stride + 1:
        raise ValueError(f"batch of {x.shape[0]} cannot form an edl triple")
    variational = model.variational if variational is None else variational
    out = model.forward(x, rng, variational)
    zero = Tensor(np.zeros((), dtype=x.dtype))
    recon = ((out.recon - x) ** 2).mean()
    kl = kl_term(out.mean, out.logvar) if variational else zero
    e = edl(out.mean, positions, stride=cfg.triple_stride) if cfg.lambda_edl > 0 else zero
    total = cfg.lambda_edl * e
    if not cfg.edl_only:
        total = recon + cfg.beta_kl * kl + total
    parts = {"recon": float(recon.data), "kl": float(kl.data), "edl": float(e.data)}
    return total, parts


def _windows(n, b):
    starts = list(range(0, n - b + 1, b))
    if starts and starts[-1] + b < n:
        starts.append(n - b)
    return starts


@dataclass
class MapEpochRecord:
    epoch: int
    loss: float
    recon: float
    kl: float
    edl: float
    lr: float
    faults: int


def train_map(model, images, positions, cfg=MapTrainConfig()):
    """Train on consecutive keyframe windows; window order is shuffled per epoch."""
    images = np.asarray(images)
    positions = np.asarray(positions, dtype=np.float64)
    n = len(images)
    if n < cfg.batch_size or len(positions) != n:
        raise ValueError(f"need >= {cfg.batch_size} keyframes with positions (got {n})")
    rng = seeded_rng(cfg.seed)
    starts = _windows(n, cfg.batch_size)
    schedule = Schedule(cfg.lr_max, cfg.lr_min, (cfg.epochs * len(starts) - 1,))
    opt = AdamW(model.named_parameters(), weight_decay=0.0)
    history, t = [], 0
    for epoch in range(cfg.epochs):
        sums = np.zeros(4)
        for k in rng.permutation(len(starts)):
            s = starts[k]
            loss, parts = map_loss(model, images[s:s + cfg.batch_size],
                                   positions[s:s + cfg.batch_size], cfg, rng)
            opt.zero_grad()
            loss.backward()
            lr = cosine_lr(schedule, t)
            if not opt.step(lr) and opt.state.faults > cfg.max_faults:
                raise MapTrainingFault(f"{opt.state.faults} non-finite gradient steps "
                                       f"(epoch {epoch + 1}, step {t}, parts {parts})")
            t += 1
            sums += (float(loss.data), parts["recon"], parts["kl"], parts["edl"])
        rec = MapEpochRecord(epoch + 1, *map(float, sums / len(starts)), lr, opt.state.faults)
        history.append(rec)
        log.info("map epoch %d loss %.6g (recon %.4g kl %.4g edl %.4g)",
                 rec.epoch, rec.loss, rec.recon, rec.kl, rec.edl)
    return model, history


# --------------------------------------------------------------- keyframes

@dataclass(frozen=True)
class StridePolicy:
    k: int

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("stride must be positive")


@dataclass(frozen=True)
class MotionPolicy:
    distance: float
    angle: float = math.inf

    def __post_init__(self):
        if not (self.distance > 0 and self.angle > 0):
            raise ValueError("motion thresholds must be positive")


def parse_policy(text):
    """'stride:K' or 'motion:D[:THETA]'."""
    kind, _, rest = text.strip().partition(":")
    args = rest.split(":") if rest else []
    try:
        if kind == "stride" and len(args) == 1:
            return StridePolicy(int(args[0]))
        if kind == "motion" and len(args) in (1, 2):
            return MotionPolicy(*(float(a) for a in args))
    except ValueError as exc:
        raise ValueError(f"bad keyframe policy {text!r}: {exc}") from None
    raise ValueError(f"bad keyframe policy {text!r}")


def select_keyframes(traj, policy):
    if isinstance(policy, str):
        policy = parse_policy(policy)
    ids = [int(f) for f in traj.frame_ids]
    if isinstance(policy, StridePolicy):
        return ids[::policy.k]
    chosen, last = [ids[0]], traj[0]
    for i in range(1, len(traj)):
        rel = relative(last, traj[i])
        if (np.linalg.norm(rel.translation) >= policy.distance
                or rotation_angle(rel.rotation) >= policy.angle):
            chosen.append(ids[i])
            last = traj[i]
    return chosen
