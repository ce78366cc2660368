"""Parameter-holding building blocks: affine maps, MLPs, convolutions, layer norm."""
from __future__ import annotations

import math

import numpy as np

from . import linalg as L
from .linalg import ParamTensor, XorShift64


class Module:
    """Collects ``ParamTensor`` attributes and child modules under dotted names."""

    def named_params(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, ParamTensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_params(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{prefix}{key}.{i}.")

    def params(self):
        return dict(self.named_params())

    def zero_grad(self):
        for p in self.params().values():
            p.zero_grad()


def init_uniform(rng: XorShift64, shape, fan_in, name):
    a = 1.0 / math.sqrt(fan_in)
    return ParamTensor(name, rng.uniform(-a, a, size=shape))


class Linear(Module):
    """``y = x W + b`` acting on the last axis."""

    def __init__(self, rng, d_in, d_out):
        self.weight = init_uniform(rng, (d_in, d_out), d_in, "weight")
        self.bias = init_uniform(rng, (d_out,), d_in, "bias")

    def __call__(self, x):
        return L.add(L.matmul(x, self.weight), self.bias)


class MLP(Module):
    """Affine layers with ReLU between them (none after the last)."""

    def __init__(self, rng, sizes):
        self.layers = [Linear(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = L.relu(x)
        return x


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, k=3):
        fan_in = c_in * k * k
        self.weight = init_uniform(rng, (c_out, c_in, k, k), fan_in, "weight")
        self.bias = init_uniform(rng, (c_out,), fan_in, "bias")

    def __call__(self, x):
        return L.conv2d(x, self.weight, self.bias)


class ConvNet(Module):
    """Stacked convolutions with ReLU between layers."""

    def __init__(self, rng, channels, kernels, final_relu=False):
        self.layers = [Conv2d(rng, a, b, k) for a, b, k in zip(channels[:-1], channels[1:], kernels)]
        self.final_relu = final_relu

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_relu:
                x = L.relu(x)
        return x


class LayerNorm(Module):
    """Layer norm over the last axis, or over ``axis`` with a matching gain shape."""

    def __init__(self, d, axis=-1, eps=1e-5):
        shape = (d,) if axis == -1 else (d, 1, 1)
        self.gain = ParamTensor("gain", np.ones(shape))
        self.bias = ParamTensor("bias", np.zeros(shape))
        self.axis = axis
        self.eps = eps

    def __call__(self, x):
        return L.layer_norm(x, self.gain, self.bias, self.eps, axis=self.axis)
