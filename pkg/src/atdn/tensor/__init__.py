from . import autograd as ops
from .autograd import GraphError, ShapeError, Tensor, no_grad
from .checkpoint import fingerprint, load_checkpoint, save_checkpoint
from .nn import Conv2d, Linear, Module
from .optim import AdamW, OptimizerState, Schedule, ScheduleError, adamw_step, cosine_lr
from .rng import seeded_rng
