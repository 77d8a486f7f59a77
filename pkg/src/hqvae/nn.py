"""Parameter containers and the convolutional blocks used by the encoder/decoder."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _collect(name, val, out):
    if isinstance(val, Tensor) and val.requires_grad:
        out[name] = val
    elif isinstance(val, Module):
        out.update(val.named_parameters(name + "."))
    elif isinstance(val, (list, tuple)):
        # nested lists, e.g. per-resolution stacks of blocks
        for i, item in enumerate(val):
            _collect(f"{name}.{i}", item, out)


class Module:
    """Walks attributes to collect parameters with dotted names."""

    def named_parameters(self, prefix=""):
        out = {}
        for key, val in vars(self).items():
            _collect(f"{prefix}{key}", val, out)
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def param(array, name=None):
    return Tensor(np.asarray(array, dtype=T.get_dtype()), requires_grad=True, name=name)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, stride=1, padding=None, rng=None, scale=1.0):
        rng = rng or np.random.default_rng()
        if padding is None:
            padding = (k - 1) // 2
        fan_in = c_in * k * k
        self.weight = param(rng.standard_normal((c_out, c_in, k, k)) * scale / np.sqrt(fan_in))
        self.bias = param(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, k, stride=1, padding=None, rng=None, scale=1.0):
        rng = rng or np.random.default_rng()
        if padding is None:
            padding = (k - 1) // 2
        fan_in = c_in * k * k / (stride * stride)
        self.weight = param(rng.standard_normal((c_in, c_out, k, k)) * scale / np.sqrt(fan_in))
        self.bias = param(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


# keeps unit activation variance through a GELU (E[gelu(x)^2] ~ 0.425 for x ~ N(0, 1))
GELU_GAIN = 1.0 / np.sqrt(0.425)


class ConvBlock(Module):
    """GELU -> 1x1 -> GELU -> 3x3 -> GELU -> 1x1 bottleneck with mid width c_mid * c_in."""

    def __init__(self, c_in, c_out, c_mid=0.5, rng=None, out_scale=1.0):
        mid = max(1, int(round(c_in * c_mid)))
        self.c1 = Conv2d(c_in, mid, 1, rng=rng, scale=GELU_GAIN)
        self.c2 = Conv2d(mid, mid, 3, rng=rng, scale=GELU_GAIN)
        self.c3 = Conv2d(mid, c_out, 1, rng=rng, scale=out_scale * GELU_GAIN)

    def __call__(self, x):
        h = self.c1(T.gelu(x))
        h = self.c2(T.gelu(h))
        return self.c3(T.gelu(h))


class ResBlock(Module):
    def __init__(self, c, c_mid=0.5, rng=None):
        # small output scale keeps deep residual stacks near identity at init
        self.block = ConvBlock(c, c, c_mid, rng=rng, out_scale=0.3)

    def __call__(self, x):
        return x + self.block(x)
