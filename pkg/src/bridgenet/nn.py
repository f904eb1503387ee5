"""Parameterised building blocks: projections, FFN, convolutions and the HDC stack."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from .tensor import (
    Rng,
    ShapeError,
    Tensor,
    add,
    concat,
    conv2d,
    gelu,
    get_default_dtype,
    layer_norm,
    linear,
    permute,
)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Container that discovers parameters and sub-modules through attributes."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item
                    elif isinstance(item, (list, tuple)):
                        for k, sub in enumerate(item):
                            if isinstance(sub, Module):
                                yield from sub.named_parameters(f"{name}.{i}.{k}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state, strict: bool = True):
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            arr = np.asarray(arr)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def fan_in_uniform(rng: Rng, shape, fan_in: int) -> np.ndarray:
    """Kaiming-uniform with unit (linear) gain: U(-b, b), b = sqrt(3 / fan_in)."""
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


def _zeros(*shape):
    return np.zeros(shape, dtype=get_default_dtype())


class LinearProj(Module):
    def __init__(self, c_in: int, c_out: int, rng: Rng, bias: bool = True):
        self.weight = Parameter(fan_in_uniform(rng, (c_out, c_in), c_in))
        self.bias = Parameter(_zeros(c_out)) if bias else None

    @property
    def c_in(self):
        return self.weight.shape[1]

    @property
    def c_out(self):
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)

    def zero_(self):
        self.weight.data[...] = 0
        if self.bias is not None:
            self.bias.data[...] = 0
        return self


def linear_forward(p: LinearProj, x: Tensor) -> Tensor:
    """``x @ weight.T + bias`` over the last axis."""
    if x.shape[-1] != p.c_in:
        raise ShapeError(f"linear: input last dim {x.shape[-1]} != {p.c_in}")
    return linear(x, p.weight, p.bias)


class LayerNormParams(Module):
    def __init__(self, c: int):
        self.gamma = Parameter(np.ones(c, dtype=get_default_dtype()))
        self.beta = Parameter(_zeros(c))

    def forward(self, x):
        return layer_norm(x, self.gamma, self.beta)


class FfnBlock(Module):
    """Layer norm followed by a two-layer GELU MLP with expansion ``ratio``."""

    def __init__(self, c: int, rng: Rng, ratio: int = 2):
        self.norm = LayerNormParams(c)
        self.fc1 = LinearProj(c, ratio * c, rng)
        self.fc2 = LinearProj(ratio * c, c, rng)

    def branch(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(self.norm(x))))

    def forward(self, x: Tensor) -> Tensor:
        return ffn_forward(self, x)

    def branch_map(self, x: Tensor) -> Tensor:
        """Apply :meth:`branch` per pixel of an ``N x C x H x W`` map."""
        y = self.branch(permute(x, (0, 2, 3, 1)))
        return permute(y, (0, 3, 1, 2))


def ffn_forward(f: FfnBlock, x: Tensor) -> Tensor:
    if x.shape[-1] != f.norm.gamma.shape[0]:
        raise ShapeError(f"ffn: channel dim {x.shape[-1]} != {f.norm.gamma.shape[0]}")
    return add(x, f.branch(x))


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: Rng, stride: int = 1,
                 padding: int = 0, dilation: int = 1, groups: int = 1, bias: bool = True):
        fan_in = (c_in // groups) * k * k
        self.weight = Parameter(fan_in_uniform(rng, (c_out, c_in // groups, k, k), fan_in))
        self.bias = Parameter(_zeros(c_out)) if bias else None
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, dilation=self.dilation,
                      groups=self.groups, padding=self.padding)

    def zero_(self):
        self.weight.data[...] = 0
        if self.bias is not None:
            self.bias.data[...] = 0
        return self


def conv1x1(w, x: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-pixel linear map; ``w`` is a :class:`Conv2d` module or a ``C_out x C_in (x 1 x 1)`` tensor."""
    if isinstance(w, Conv2d):
        return w(x)
    weight = w if w.ndim == 4 else w.reshape(w.shape + (1, 1))
    if x.shape[-3] != weight.shape[1]:
        raise ShapeError(f"conv1x1: input channels {x.shape[-3]} != weight {weight.shape[1]}")
    return conv2d(x, weight, bias)


class DwSepDilatedConv(Module):
    """3x3 depthwise conv with dilation ``d`` (same padding) then a 1x1 pointwise conv."""

    def __init__(self, c_in: int, c_out: int, dilation: int, rng: Rng):
        self.dilation = dilation
        self.depthwise = Conv2d(c_in, c_in, 3, rng, padding=dilation, dilation=dilation, groups=c_in)
        self.pointwise = Conv2d(c_in, c_out, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))

    def zero_(self):
        self.depthwise.zero_()
        self.pointwise.zero_()
        return self


HDC_DILATIONS = (1, 2, 5)


class HdcBlock(Module):
    """Three depthwise-separable dilated convs (rates 1, 2, 5), GELU after each.

    The block input is added back when ``c_in == c_out``.
    """

    def __init__(self, c_in: int, c_out: int, rng: Rng, dilations=HDC_DILATIONS):
        self.dilations = tuple(dilations)
        chans = [c_in] + [c_out] * len(self.dilations)
        self.convs = [DwSepDilatedConv(a, b, d, rng)
                      for a, b, d in zip(chans[:-1], chans[1:], self.dilations)]
        self.c_in, self.c_out = c_in, c_out

    def branch(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = gelu(conv(x))
        return x

    def forward(self, x: Tensor) -> Tensor:
        return hdc_forward(self, x)

    @property
    def receptive_field(self) -> int:
        return 1 + 2 * sum(self.dilations)


def hdc_forward(h: HdcBlock, x: Tensor) -> Tensor:
    y = h.branch(x)
    if h.c_in == h.c_out:
        y = add(x, y)
    return y


def stack_channels(tensors) -> Tensor:
    return concat(list(tensors), axis=1)
