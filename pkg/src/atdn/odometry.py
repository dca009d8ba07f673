"""Flow-to-pose regressor and its curriculum training.

The head maps a (downsampled) flow field to a 6-vector: translation in
metres followed by an axis-angle rotation. Training minimises the per-step
pose loss plus ``alpha`` times a windowed composition loss that compares
composed predictions with composed ground truth over ``w`` consecutive steps.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dataio.formats import FlowField, area_resize
from .geometry import (
    Pose,
    Trajectory,
    axis_angle_to_matrix,
    compose,
    matrix_to_axis_angle,
)
from .tensor import autograd as ag
from .tensor.autograd import Tensor, no_grad
from .tensor.nn import Conv2d, Linear, Module
from .tensor.optim import AdamW, Schedule, cosine_lr
from .tensor.rng import seeded_rng

log = logging.getLogger(__name__)

DEFAULT_KAPPA = 100.0


class NumericFault(RuntimeError):
    """Too many optimizer steps were skipped for non-finite gradients."""


# ------------------------------------------------------------- pose delta

@dataclass(frozen=True, eq=False)
class PoseDelta:
    translation: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(r))):
            raise ValueError("pose delta must be finite")
        if np.linalg.norm(r) >= np.pi:
            r = matrix_to_axis_angle(axis_angle_to_matrix(r))
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", r)

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])

    @classmethod
    def from_pose(cls, p):
        return cls(p.translation, matrix_to_axis_angle(p.rotation))

    def as_vector(self):
        return np.concatenate([self.translation, self.rotation])

    def to_pose(self):
        return Pose(axis_angle_to_matrix(self.rotation), self.translation)


# ------------------------------------------------------------------ model

@dataclass(frozen=True)
class VoConfig:
    flow_height: int = 64
    flow_width: int = 64
    pool: int = 4
    channels: tuple = (8, 16)
    hidden: int = 64
    # bias-free layers keep the head positively homogeneous: zero flow -> zero motion
    bias: bool = False

    @property
    def input_shape(self):
        return self.flow_height // self.pool, self.flow_width // self.pool


class VoModel(Module):
    def __init__(self, config=VoConfig(), seed=0, zero_init_head=True, dtype=np.float32):
        rng = seeded_rng(seed)
        c1, c2 = config.channels
        h, w = config.input_shape
        if h % 4 or w % 4:
            raise ValueError("pooled flow size must be divisible by 4")
        self.config = config
        self.conv1 = Conv2d(2, c1, 3, rng, stride=2, padding=1, bias=config.bias, dtype=dtype)
        self.conv2 = Conv2d(c1, c2, 3, rng, stride=2, padding=1, bias=config.bias, dtype=dtype)
        self.fc1 = Linear(c2 * (h // 4) * (w // 4), config.hidden, rng, bias=config.bias, dtype=dtype)
        self.fc2 = Linear(config.hidden, 6, rng, bias=config.bias, zero_init=zero_init_head, dtype=dtype)

    def __call__(self, x):
        x = self.conv1(x).relu()
        x = self.conv2(x).relu()
        x = x.reshape(x.shape[0], -1)
        return self.fc2(self.fc1(x).relu())


def prepare_flow(flow, config):
    """FlowField -> (2, h, w) network input."""
    data = flow.data if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float32)
    if data.shape != (config.flow_height, config.flow_width, 2):
        raise ValueError(f"flow is {data.shape[:2]}, model expects "
                         f"{(config.flow_height, config.flow_width)}")
    h, w = config.input_shape
    return np.ascontiguousarray(area_resize(data, h, w).transpose(2, 0, 1))


def predict_vectors(model, inputs, batch_size=256):
    """Raw 6-vectors for prepared inputs (N, 2, h, w)."""
    dtype = model.fc2.weight.dtype
    out = []
    with no_grad():
        for i in range(0, len(inputs), batch_size):
            out.append(model(Tensor(np.asarray(inputs[i:i + batch_size], dtype=dtype))).data)
    return np.concatenate(out, axis=0).astype(np.float64) if out else np.zeros((0, 6))


def predict_delta(model, flow):
    return PoseDelta.from_vector(predict_vectors(model, prepare_flow(flow, model.config)[None])[0])


def predict_deltas(model, flows):
    inputs = np.stack([prepare_flow(f, model.config) for f in flows])
    return [PoseDelta.from_vector(v) for v in predict_vectors(model, inputs)]


# ------------------------------------------------- differentiable rotations

_HAT = np.zeros((3, 9))
_HAT[0, [7, 5]] = 1.0, -1.0   # e_x -> [[0,0,0],[0,0,-1],[0,1,0]]
_HAT[1, [2, 6]] = 1.0, -1.0
_HAT[2, [3, 1]] = 1.0, -1.0
_VEE = np.zeros((9, 3))       # 0.5 * vee(R - R^T)
_VEE[[7, 5], 0] = 0.5, -0.5
_VEE[[2, 6], 1] = 0.5, -0.5
_VEE[[3, 1], 2] = 0.5, -0.5
_TRACE = np.zeros((9, 1))
_TRACE[[0, 4, 8], 0] = 1.0


def _const(a, like):
    return Tensor(np.asarray(a, dtype=like.dtype))


def exp_so3(r):
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3)."""
    lead = r.shape[:-1]
    s = ag.sum_sq(r, axis=-1, keepdims=True)
    a = ag.sinc_sqrt(s).reshape(*lead, 1, 1)
    b = ag.versine_sqrt(s).reshape(*lead, 1, 1)
    k = ag.matmul(r, _const(_HAT, r)).reshape(*lead, 3, 3)
    return _const(np.eye(3), r) + a * k + b * ag.matmul(k, k)


def log_so3(rot):
    """Rotation matrices (..., 3, 3) -> axis-angle (..., 3); angle must stay below pi."""
    lead = rot.shape[:-2]
    flat = rot.reshape(*lead, 9)
    v = ag.matmul(flat, _const(_VEE, rot))
    c = (ag.matmul(flat, _const(_TRACE, rot)) - 1.0) * 0.5
    s = ag.sum_sq(v, axis=-1, keepdims=True)
    return v * ag.atan_ratio(s, c)


def compose_window(t, r):
    """Compose deltas along axis -2: t, r (B, w, 3) -> composite (t, r) each (B, 3)."""
    w = t.shape[-2]
    if w == 1:
        return t[:, 0], r[:, 0]
    rots = exp_so3(r)
    acc_r, acc_t = rots[:, 0], t[:, 0]
    for j in range(1, w):
        step_t = t[:, j].reshape(-1, 3, 1)
        acc_t = acc_t + ag.matmul(acc_r, step_t).reshape(-1, 3)
        acc_r = ag.matmul(acc_r, rots[:, j])
    return acc_t, log_so3(acc_r)


def pose_terms(pred_t, pred_r, gt_t, gt_r, kappa=DEFAULT_KAPPA):
    """Per-item ||t - t_gt||^2 + kappa ||r - r_gt||^2 over the last axis."""
    dt = pred_t - _const(gt_t, pred_t)
    dr = pred_r - _const(gt_r, pred_r)
    return ag.sum_sq(dt, axis=-1) + kappa * ag.sum_sq(dr, axis=-1)


def _as_pred_tensor(preds):
    if isinstance(preds, Tensor):
        return preds.reshape(-1, 6)
    return Tensor(np.array([p.as_vector() for p in preds], dtype=np.float64))


def _gt_vectors(gts):
    return (np.array([g.translation for g in gts]).reshape(-1, 3),
            np.array([matrix_to_axis_angle(g.rotation) for g in gts]).reshape(-1, 3))


def step_loss(pred, gt, kappa=DEFAULT_KAPPA):
    """Single-step loss between a predicted delta and a ground-truth relative pose."""
    p = _as_pred_tensor([pred] if isinstance(pred, PoseDelta) else pred)
    gt_t, gt_r = _gt_vectors([gt])
    return pose_terms(p[:, :3], p[:, 3:], gt_t, gt_r, kappa).mean()


def gt_window_composites(gts, w):
    """Axis-angle and translation of every length-w composite of ``gts``."""
    n_win = len(gts) - w + 1
    ts, rs = np.zeros((n_win, 3)), np.zeros((n_win, 3))
    for s in range(n_win):
        p = gts[s]
        for j in range(1, w):
            p = compose(p, gts[s + j])
        ts[s] = p.translation
        rs[s] = matrix_to_axis_angle(p.rotation)
    return ts, rs


def composition_loss(preds, gts, w, kappa=DEFAULT_KAPPA):
    """Mean over sliding windows of the loss between composed predictions and composed truth."""
    p = _as_pred_tensor(preds)
    n = p.shape[0]
    if n != len(gts):
        raise ValueError("preds and gts differ in length")
    if w < 1 or w > n:
        raise ValueError(f"window {w} larger than sequence of {n}")
    idx = np.arange(n - w + 1)[:, None] + np.arange(w)[None, :]
    win = p[idx]
    ct, cr = compose_window(win[..., :3], win[..., 3:])
    gt_t, gt_r = gt_window_composites(gts, w)
    return pose_terms(ct, cr, gt_t, gt_r, kappa).mean()


# -------------------------------------------------------------- curriculum

@dataclass(frozen=True)
class Stage:
    alpha: float
    epochs: int
    window: int


DEFAULT_STAGES = (Stage(1.0, 5, 2), Stage(0.7, 5, 4), Stage(0.3, 10, 6), Stage(0.3, 10, 8))


@dataclass(frozen=True)
class CurriculumPlan:
    stages: tuple = DEFAULT_STAGES
    lr_max: float = 1e-3
    lr_min: float = 1e-6

    def __post_init__(self):
        prev = 0
        for s in self.stages:
            if not 0.0 <= s.alpha <= 1.0:
                raise ValueError(f"alpha {s.alpha} outside [0, 1]")
            if s.window < 2:
                raise ValueError(f"window {s.window} < 2")
            if s.window < prev:
                raise ValueError("window lengths must not decrease across stages")
            if s.epochs < 1:
                raise ValueError("each stage needs at least one epoch")
            prev = s.window


@dataclass(frozen=True)
class VoSequence:
    """Prepared inputs (N, 2, h, w) with the N ground-truth relative poses they encode."""

    inputs: np.ndarray
    relposes: tuple

    def __post_init__(self):
        if len(self.inputs) != len(self.relposes):
            raise ValueError("inputs and relative poses differ in length")


def make_sequence(flows, relposes, config):
    return VoSequence(np.stack([prepare_flow(f, config) for f in flows]), tuple(relposes))


@dataclass
class TrainOptions:
    kappa: float = DEFAULT_KAPPA
    batch_size: int = 8
    weight_decay: float = 1e-2
    max_faults: int = 10


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    loss: float
    step_loss: float
    comp_loss: float
    lr: float
    faults: int


def _windows(sequences, w):
    return [(si, s) for si, seq in enumerate(sequences) for s in range(len(seq.relposes) - w + 1)]


def _run_plan(model, sequences, plan, seed, opts, use_composition):
    rng = seeded_rng(seed)
    dtype = model.fc2.weight.dtype
    step_gt = [_gt_vectors(seq.relposes) for seq in sequences]
    stage_windows = []
    for stage in plan.stages:
        win = _windows(sequences, stage.window)
        if not win:
            raise ValueError(f"no sequence is long enough for window {stage.window}")
        stage_windows.append(win)
    steps = [st.epochs * math.ceil(len(win) / opts.batch_size) for st, win in zip(plan.stages, stage_windows)]
    schedule = Schedule(plan.lr_max, plan.lr_min, tuple(n - 1 for n in steps))
    opt = AdamW(model.named_parameters(), weight_decay=opts.weight_decay)
    history, t = [], 0
    for si, (stage, win) in enumerate(zip(plan.stages, stage_windows)):
        w = stage.window
        comp_gt = [gt_window_composites(seq.relposes, w) if use_composition and stage.alpha else None
                   for seq in sequences]
        for epoch in range(stage.epochs):
            order = rng.permutation(len(win))
            sums = np.zeros(3)
            n_batches = 0
            for b0 in range(0, len(order), opts.batch_size):
                batch = [win[i] for i in order[b0:b0 + opts.batch_size]]
                x = np.stack([sequences[q].inputs[s:s + w] for q, s in batch]).astype(dtype)
                gt_t = np.stack([step_gt[q][0][s:s + w] for q, s in batch])
                gt_r = np.stack([step_gt[q][1][s:s + w] for q, s in batch])
                out = model(Tensor(x.reshape(-1, *x.shape[2:]))).reshape(len(batch), w, 6)
                pt, pr = out[..., :3], out[..., 3:]
                l_step = pose_terms(pt, pr, gt_t, gt_r, opts.kappa).mean()
                loss, l_comp = l_step, 0.0
                if use_composition and stage.alpha:
                    ct, cr = compose_window(pt, pr)
                    cgt_t = np.stack([comp_gt[q][0][s] for q, s in batch])
                    cgt_r = np.stack([comp_gt[q][1][s] for q, s in batch])
                    comp = pose_terms(ct, cr, cgt_t, cgt_r, opts.kappa).mean()
                    loss = l_step + stage.alpha * comp
                    l_comp = float(comp.data)
                opt.zero_grad()
                loss.backward()
                lr = cosine_lr(schedule, t)
                if not opt.step(lr) and opt.state.faults > opts.max_faults:
                    raise NumericFault(
                        f"{opt.state.faults} non-finite gradient steps (stage {si + 1}, "
                        f"epoch {epoch + 1}, step {t}, loss {float(loss.data)!r})")
                t += 1
                sums += (float(loss.data), float(l_step.data), l_comp)
                n_batches += 1
            rec = EpochRecord(si + 1, epoch + 1, *map(float, sums / n_batches), lr, opt.state.faults)
            history.append(rec)
            log.info("vo stage %d epoch %d loss %.6g (step %.6g comp %.6g) lr %.3g",
                     rec.stage, rec.epoch, rec.loss, rec.step_loss, rec.comp_loss, rec.lr)
    return model, history


def train_vo(model, sequences, plan=CurriculumPlan(), seed=0, options=None):
    """Run every curriculum stage in order; the lr schedule restarts per stage."""
    return _run_plan(model, sequences, plan, seed, options or TrainOptions(), True)


def train_vo_stepwise(model, sequences, plan=CurriculumPlan(), seed=0, options=None):
    """Same sampling and schedule as :func:`train_vo` but per-step loss only."""
    return _run_plan(model, sequences, plan, seed, options or TrainOptions(), False)


def integrate(deltas, start=None, first_id=0):
    """Accumulate deltas from ``start``; returns len(deltas) + 1 poses."""
    p = Pose.identity() if start is None else start
    poses = [p]
    for d in deltas:
        step = d.to_pose() if isinstance(d, PoseDelta) else d
        p = compose(p, step)
        poses.append(p)
    return Trajectory.from_poses(poses, np.arange(first_id, first_id + len(poses)))
