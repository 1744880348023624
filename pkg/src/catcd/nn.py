"""Minimal module tree: named parameters, batch-norm buffers, train/eval mode."""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .autograd import Parameter, get_default_dtype


class Module:
    training = True

    def children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        """Batch-norm running statistics as ``(name, state, attribute)`` triples."""
        for key, value in vars(self).items():
            if isinstance(value, ops.BatchNormState):
                yield f"{prefix}{key}.running_mean", value, "running_mean"
                yield f"{prefix}{key}.running_var", value, "running_var"
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def assign_names(self):
        names = set()
        for name, p in self.named_parameters():
            if name in names:
                raise ValueError(f"duplicate parameter name {name!r}")
            names.add(name)
            p.name = name
        return self

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast parameters and running statistics in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, state, attr in self.named_buffers():
            value = getattr(state, attr)
            if value is not None:
                setattr(state, attr, value.astype(dtype))
        return self

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def trunc_normal(rng, shape, std=0.02, dtype=None):
    values = rng.standard_normal(shape)
    bad = np.abs(values) > 2.0
    while bad.any():
        values[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(values) > 2.0
    return (values * std).astype(dtype or get_default_dtype())


def kaiming_uniform(rng, shape, dtype=None):
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / math.sqrt(fan_in)  # a = sqrt(5) convention
    return rng.uniform(-bound, bound, size=shape).astype(dtype or get_default_dtype())


def _zeros(n):
    return np.zeros(n, dtype=get_default_dtype())


def _ones(n):
    return np.ones(n, dtype=get_default_dtype())


class Linear(Module):
    def __init__(self, rng, cin, cout, bias=True, std=0.02):
        self.weight = Parameter(trunc_normal(rng, (cin, cout), std))
        self.bias = Parameter(_zeros(cout)) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, rng, cin, cout, k=3, bias=True):
        w = kaiming_uniform(rng, (cout, cin, k, k))
        self.weight = Parameter(w)
        if bias:
            bound = 1.0 / math.sqrt(cin * k * k)
            self.bias = Parameter(rng.uniform(-bound, bound, size=cout).astype(get_default_dtype()))
        else:
            self.bias = None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, channels, eps=1e-5):
        self.weight = Parameter(_ones(channels))
        self.bias = Parameter(_zeros(channels))
        self.eps = eps

    def forward(self, x):
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.weight = Parameter(_ones(channels))
        self.bias = Parameter(_zeros(channels))
        self.state = ops.BatchNormState(channels, momentum, eps, dtype=get_default_dtype())

    def forward(self, x):
        return ops.batch_norm2d(x, self.weight, self.bias, self.state, self.training)


def to_tokens(x):
    """B x C x H x W -> B x (H W) x C."""
    B, C, H, W = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (B, H * W, C))


def to_map(tokens, H, W):
    """B x (H W) x C -> B x C x H x W."""
    B, N, C = tokens.shape
    return ops.transpose(ops.reshape(tokens, (B, H, W, C)), (0, 3, 1, 2))
