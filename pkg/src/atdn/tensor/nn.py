"""Parameter containers and the two layer types the networks need."""
import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    """Walks attributes for Tensors and sub-modules to name parameters."""

    def named_parameters(self, prefix=""):
        out = {}
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for k, p in params.items():
            a = np.asarray(state[k])
            if a.shape != p.shape:
                raise ValueError(f"{k}: shape {a.shape} != {p.shape}")
            p.data = a.astype(p.dtype).copy()

    def astype(self, dtype):
        """Cast every parameter in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _param(a, dtype):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, zero_init=False, dtype=np.float32):
        bound = np.sqrt(6.0 / n_in)  # He-uniform for ReLU stacks
        w = np.zeros((n_in, n_out)) if zero_init else rng.uniform(-bound, bound, (n_in, n_out))
        self.weight = _param(w, dtype)
        self.bias = _param(np.zeros(n_out), dtype) if bias else None

    def __call__(self, x):
        y = ag.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding=0, bias=True, dtype=np.float32):
        fan_in = c_in * k * k
        bound = np.sqrt(6.0 / fan_in)
        self.weight = _param(rng.uniform(-bound, bound, (c_out, c_in, k, k)), dtype)
        self.bias = _param(np.zeros((1, c_out, 1, 1)), dtype) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        y = ag.conv2d(x, self.weight, self.stride, self.padding)
        return y + self.bias if self.bias is not None else y
