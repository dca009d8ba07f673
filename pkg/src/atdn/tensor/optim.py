"""AdamW and the restarting cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Cosine annealing from ``lr_max`` to ``lr_min``, restarted per segment.

    ``segments`` holds the length T_k of each segment; segment k covers
    T_k + 1 consecutive steps t_local = 0..T_k, so its last step runs at
    ``lr_min`` and the first step of the next segment is back at ``lr_max``.
    """

    lr_max: float
    lr_min: float
    segments: tuple

    def __post_init__(self):
        if not 0 <= self.lr_min <= self.lr_max:
            raise ScheduleError("need 0 <= lr_min <= lr_max")
        if not self.segments or any(int(t) < 0 for t in self.segments):
            raise ScheduleError("segments must be non-negative lengths")
        object.__setattr__(self, "segments", tuple(int(t) for t in self.segments))

    @property
    def last_step(self):
        """Index of the final step (T)."""
        return sum(t + 1 for t in self.segments) - 1

    @property
    def boundaries(self):
        """Global step index at which each segment starts."""
        starts, s = [], 0
        for t in self.segments:
            starts.append(s)
            s += t + 1
        return tuple(starts)

    def locate(self, t):
        if t < 0 or t > self.last_step:
            raise ScheduleError(f"step {t} outside schedule [0, {self.last_step}]")
        for start, seg in zip(self.boundaries, self.segments):
            if t <= start + seg:
                return t - start, seg
        raise AssertionError("unreachable")


def cosine_value(lr_max, lr_min, t, t_seg):
    if t == 0 or t_seg == 0:
        return lr_max
    if t == t_seg:
        return lr_min
    # lr_min + (lr_max - lr_min)(1 + cos)/2, grouped so the midpoint rounds exactly
    return 0.5 * (lr_max + lr_min) + 0.5 * (lr_max - lr_min) * math.cos(math.pi * t / t_seg)


def cosine_lr(schedule, t):
    local, seg = schedule.locate(t)
    return cosine_value(schedule.lr_max, schedule.lr_min, local, seg)


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    faults: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class AdamW:
    """Adam with decoupled weight decay; ``weight_decay=0`` gives plain Adam.

    A step whose gradients contain NaN or Inf is skipped and counted in
    ``state.faults`` instead of raising.
    """

    def __init__(self, named_params, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.state = OptimizerState(beta1, beta2, eps, weight_decay)
        for k, p in self.params.items():
            self.state.m[k] = np.zeros_like(p.data)
            self.state.v[k] = np.zeros_like(p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        """Apply one update; returns False when the step was skipped."""
        s = self.state
        for p in self.params.values():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                s.faults += 1
                return False
        s.step += 1
        bc1 = 1.0 - s.beta1 ** s.step
        bc2 = 1.0 - s.beta2 ** s.step
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = s.m[k], s.v[k]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            if s.weight_decay:
                p.data = p.data * (1.0 - lr * s.weight_decay)
            update = (m / bc1) / (np.sqrt(v / bc2) + s.eps)
            p.data = (p.data - lr * update).astype(p.dtype)
        return True


def adamw_step(params, state, lr):
    """Functional form: update ``params`` (name -> Tensor) using ``state``."""
    opt = AdamW.__new__(AdamW)
    opt.params = dict(params)
    opt.state = state
    for k, p in opt.params.items():
        state.m.setdefault(k, np.zeros_like(p.data))
        state.v.setdefault(k, np.zeros_like(p.data))
    return opt.step(lr)
