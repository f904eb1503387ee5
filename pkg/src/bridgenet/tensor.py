"""Minimal n-d tensor with reverse-mode autodiff.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` on raw numpy arrays and a ``backward`` returning one gradient per
input.  The graph is recorded implicitly: each output tensor keeps a reference
to the function that produced it, and :meth:`Tensor.backward` replays the
recorded functions in reverse topological order.

Spatial ops use an ``N x C x H x W`` layout; a ``C x H x W`` input is treated
as a batch of one and returned without the batch axis.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class _State(threading.local):
    # per thread, so that no_grad in one worker cannot leak into another
    def __init__(self):
        self.grad_enabled = True
        self.dtype = np.float32


_state = _State()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """Operation parameters produce an invalid configuration."""


def get_default_dtype():
    return _state.dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class Rng:
    """Seeded random stream.

    Backed by numpy's PCG64 bit generator seeded through ``SeedSequence``;
    both are specified algorithms, so a seed maps to the same stream on
    every platform.
    """

    def __init__(self, seed=0):
        self.seed = tuple(int(s) for s in seed) if isinstance(seed, (tuple, list)) else int(seed)
        entropy = list(self.seed) if isinstance(self.seed, tuple) else self.seed
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def child(self, key: int) -> "Rng":
        """Independent stream derived from this seed and ``key``."""
        base = self.seed if isinstance(self.seed, tuple) else (self.seed,)
        return Rng(base + (int(key),))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_ctx", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype if dtype is not None else _state.dtype
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._ctx: Function | None = None
        self.name = name

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None, retain_graph: bool = False):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad.

        Gradients add into existing buffers; zero them between steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            ctx = node._ctx
            if ctx is None:
                if node.requires_grad:
                    node.grad = g.astype(node.data.dtype, copy=True) if node.grad is None else node.grad + g
                continue
            in_grads = ctx.backward(g)
            if not isinstance(in_grads, tuple):
                in_grads = (in_grads,)
            for inp, ig in zip(ctx.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
            if not retain_graph:
                node._ctx = None

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def transpose(self, a: int = -2, b: int = -1):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return permute(self, tuple(axes))

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _raise_scalar(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for inp in node._ctx.inputs:
                if id(inp) not in seen and inp.requires_grad:
                    stack.append((inp, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """One differentiable operation; subclasses implement forward/backward on arrays."""

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        res = Tensor(out, dtype=out.dtype)
        if _state.grad_enabled and any(t.requires_grad for t in inputs):
            res.requires_grad = True
            res._ctx = fn
        return res

    def forward(self, *arrays, **kwargs) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def backward(self, grad: np.ndarray):  # pragma: no cover - abstract
        raise NotImplementedError


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` over the axes that numpy broadcasting expanded from ``shape``."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead else g
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape) if axes else g.reshape(shape)


def _broadcast_shape(op: str, a, b) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


class Add(Function):
    def forward(self, a, b):
        _broadcast_shape("add", a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        sa, sb = self.shapes
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape("mul", a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        a, b = self.a, self.b
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class Scale(Function):
    def forward(self, a, factor: float = 1.0, offset: float = 0.0):
        self.factor = factor
        return (a * factor + offset).astype(a.dtype, copy=False)

    def backward(self, g):
        return g * self.factor


class ReLU(Function):
    def forward(self, a):
        self.mask = a > 0
        return a * self.mask

    def backward(self, g):
        return g * self.mask


_GELU_C = math.sqrt(2.0 / math.pi)


class GELU(Function):
    """Tanh approximation of the Gaussian error linear unit."""

    def forward(self, a):
        self.a = a
        a2 = a * a
        self.a2 = a2
        self.t = np.tanh(a * (_GELU_C + _GELU_C * 0.044715 * a2))
        return 0.5 * a * (1.0 + self.t)

    def backward(self, g):
        a, t = self.a, self.t
        dinner = _GELU_C + (_GELU_C * 3 * 0.044715) * self.a2
        return g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t**2) * dinner)


class Sigmoid(Function):
    def forward(self, a):
        self.y = _sigmoid(a)
        return self.y

    def backward(self, g):
        return g * self.y * (1.0 - self.y)


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        if np.isscalar(b) or np.ndim(b) == 0:
            return Scale.apply(as_tensor(a), factor=1.0, offset=float(b))
        b = Tensor(b, dtype=as_tensor(a).dtype)
    if not isinstance(a, Tensor):
        return add(b, a)
    return Add.apply(a, b)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        if np.isscalar(b) or np.ndim(b) == 0:
            return Scale.apply(as_tensor(a), factor=float(b))
        b = Tensor(b, dtype=as_tensor(a).dtype)
    if not isinstance(a, Tensor):
        return mul(b, a)
    return Mul.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=float(factor))


def neg(a: Tensor) -> Tensor:
    return Scale.apply(a, factor=-1.0)


def relu(a: Tensor) -> Tensor:
    return ReLU.apply(a)


def gelu(a: Tensor) -> Tensor:
    return GELU.apply(a)


def sigmoid(a: Tensor) -> Tensor:
    return Sigmoid.apply(a)


def elementwise(kind: str, *operands, factor: float | None = None) -> Tensor:
    """Dispatch by name: ``add``, ``mul``, ``relu``, ``gelu`` or ``scale``."""
    if kind == "add":
        return add(*operands)
    if kind == "mul":
        return mul(*operands)
    if kind == "relu":
        return relu(*operands)
    if kind == "gelu":
        return gelu(*operands)
    if kind == "scale":
        return scale(operands[0], factor if factor is not None else operands[1])
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions


class Sum(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.sum(), dtype=a.dtype)

    def backward(self, g):
        return np.broadcast_to(g, self.shape).copy()


class Mean(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.mean(), dtype=a.dtype)

    def backward(self, g):
        return np.full(self.shape, g / max(1, int(np.prod(self.shape))), dtype=g.dtype)


def tsum(a: Tensor) -> Tensor:
    return Sum.apply(a)


def tmean(a: Tensor) -> Tensor:
    return Mean.apply(a)


# ---------------------------------------------------------------------------
# linear algebra


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: batch dims differ for {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, g):
        a, b = self.a, self.b
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


class Linear(Function):
    def forward(self, x, w, b=None):
        if x.shape[-1] != w.shape[1]:
            raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
        self.x, self.w = x, w
        self.has_bias = b is not None
        out = x @ w.T
        if b is not None:
            out += b
        return out

    def backward(self, g):
        x, w = self.x, self.w
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w
        gw = g2.T @ x.reshape(-1, x.shape[-1])
        if self.has_bias:
            return gx, gw, g2.sum(0)
        return gx, gw


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` over the last axis of ``x``."""
    if b is None:
        return Linear.apply(x, w)
    return Linear.apply(x, w, b)


# ---------------------------------------------------------------------------
# normalisation


class SoftmaxLast(Function):
    def forward(self, a):
        z = a - a.max(axis=-1, keepdims=True)
        e = np.exp(z)
        self.y = e / e.sum(axis=-1, keepdims=True)
        return self.y

    def backward(self, g):
        y = self.y
        return y * (g - (g * y).sum(axis=-1, keepdims=True))


def softmax_lastdim(a: Tensor) -> Tensor:
    return SoftmaxLast.apply(a)


LN_EPS = 1e-5


class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps=LN_EPS):
        if x.shape[-1] != gamma.shape[0]:
            raise ShapeError(f"layer_norm: last dim of {x.shape} != {gamma.shape[0]}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.rstd
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, g):
        xhat, rstd = self.xhat, self.rstd
        c = xhat.shape[-1]
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gx_hat = g * self.gamma
        gx = rstd / c * (
            c * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


# ---------------------------------------------------------------------------
# shape manipulation


class Reshape(Function):
    def forward(self, a, shape=()):
        shape = tuple(shape)
        known = [s for s in shape if s != -1]
        if shape.count(-1) > 1 or (
            -1 not in shape and int(np.prod(shape)) != a.size
        ) or (-1 in shape and (np.prod(known) == 0 or a.size % int(np.prod(known)))):
            raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
        self.in_shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return g.reshape(self.in_shape)


class Permute(Function):
    def forward(self, a, axes=()):
        axes = tuple(int(x) for x in axes)
        if sorted(axes) != list(range(a.ndim)):
            raise ShapeError(f"permute: {axes} is not a permutation of {a.ndim} axes")
        self.inv = tuple(np.argsort(axes))
        return np.ascontiguousarray(a.transpose(axes))

    def backward(self, g):
        return np.ascontiguousarray(g.transpose(self.inv))


def reshape(a: Tensor, shape) -> Tensor:
    return Reshape.apply(a, shape=shape)


def permute(a: Tensor, axes) -> Tensor:
    return Permute.apply(a, axes=axes)


def reshape_permute(x: Tensor, new_shape=None, axis_order=None) -> Tensor:
    """Reshape and/or permute; exactly the union of :func:`reshape` and :func:`permute`."""
    if new_shape is not None:
        x = reshape(x, new_shape)
    if axis_order is not None:
        x = permute(x, axis_order)
    return x


def flatten_spatial(x: Tensor) -> Tensor:
    """``N x C x H x W`` -> ``N x (H*W) x C`` token layout."""
    n, c, h, w = x.shape
    return permute(reshape(x, (n, c, h * w)), (0, 2, 1))


def unflatten_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """Inverse of :func:`flatten_spatial`."""
    n, l, c = x.shape
    if l != h * w:
        raise ShapeError(f"cannot unflatten {l} tokens to {h}x{w}")
    return reshape(permute(x, (0, 2, 1)), (n, c, h, w))


class Concat(Function):
    def forward(self, *arrays, axis=0):
        ref = arrays[0]
        ax = axis % ref.ndim
        for a in arrays[1:]:
            if a.ndim != ref.ndim or any(
                a.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
            ):
                raise ShapeError(
                    f"concat: shapes {[x.shape for x in arrays]} disagree off axis {axis}"
                )
        self.axis = ax
        self.splits = np.cumsum([a.shape[ax] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=ax)

    def backward(self, g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, self.splits, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len(tensors) == 0:
        raise ShapeError("concat of an empty list")
    return Concat.apply(*tensors, axis=axis)


class Slice(Function):
    def forward(self, a, axis=0, start=0, stop=None):
        ax = axis % a.ndim
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(start, stop)
        self.idx = tuple(idx)
        self.shape = a.shape
        return np.ascontiguousarray(a[self.idx])

    def backward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        out[self.idx] = g
        return out


def slice_axis(a: Tensor, axis: int, start: int, stop: int | None = None) -> Tensor:
    return Slice.apply(a, axis=axis, start=start, stop=stop)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list:
    out, pos = [], 0
    for s in sizes:
        out.append(slice_axis(a, axis, pos, pos + s))
        pos += s
    if pos != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[axis]}")
    return out


# ---------------------------------------------------------------------------
# spatial ops (N x C x H x W)


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


class Conv2d(Function):
    def forward(self, x, w, b=None, stride=1, padding=0, dilation=1, groups=1):
        n, c, h, wd = x.shape
        cout, cg, k, k2 = w.shape
        if k != k2:
            raise ConfigError(f"conv2d: only square kernels supported, got {k}x{k2}")
        if c % groups or cout % groups or cg != c // groups:
            raise ShapeError(
                f"conv2d: input channels {c}, weight {w.shape} and groups {groups} disagree"
            )
        ho = conv_output_size(h, k, stride, padding, dilation)
        wo = conv_output_size(wd, k, stride, padding, dilation)
        if ho <= 0 or wo <= 0:
            raise ConfigError(
                f"conv2d: non-positive output size {ho}x{wo} for input {h}x{wd}, "
                f"k={k}, stride={stride}, padding={padding}, dilation={dilation}"
            )
        self.cfg = (n, c, h, wd, cout, cg, k, ho, wo, stride, padding, dilation, groups)
        self.has_bias = b is not None
        self.w = w
        if k == 1 and stride == 1 and padding == 0:
            cols = x.reshape(n, groups, cg, h * wd)
        else:
            if padding:
                xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
                xp[:, :, padding:-padding, padding:-padding] = x
            else:
                xp = x
            cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
            span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    r0, c0 = i * dilation, j * dilation
                    cols[:, :, i, j] = xp[:, :, r0 : r0 + span_h : stride, c0 : c0 + span_w : stride]
            cols = cols.reshape(n, groups, cg * k * k, ho * wo)
        self.cols = cols
        wg = w.reshape(groups, cout // groups, cg * k * k)
        if cg == 1 and cout == groups:
            out = np.matmul(wg[None], cols)
        else:
            out = np.matmul(wg[None], cols)
        out = out.reshape(n, cout, ho, wo)
        if b is not None:
            out += b.reshape(1, cout, 1, 1)
        return out

    def backward(self, g):
        n, c, h, wd, cout, cg, k, ho, wo, stride, padding, dilation, groups = self.cfg
        cols = self.cols
        gg = g.reshape(n, groups, cout // groups, ho * wo)
        wg = self.w.reshape(groups, cout // groups, cg * k * k)
        if cg == 1 and cout == groups:
            gw = np.matmul(cols, gg[:, :, 0, :, None]).sum(0)[:, None, :, 0]
            gcols = wg[None, :, 0, :, None] * gg[:, :, 0, None, :]
        else:
            gw = np.matmul(gg, np.swapaxes(cols, -1, -2)).sum(0)
            gcols = np.matmul(np.swapaxes(wg, 1, 2)[None], gg)
        gw = gw.reshape(self.w.shape)
        if k == 1 and stride == 1 and padding == 0:
            gx = gcols.reshape(n, c, h, wd)
        else:
            gcols = gcols.reshape(n, c, k, k, ho, wo)
            gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
            span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    r0, c0 = i * dilation, j * dilation
                    gxp[:, :, r0 : r0 + span_h : stride, c0 : c0 + span_w : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
            gx = np.ascontiguousarray(gx)
        if self.has_bias:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw


def _batched(fn):
    """Let a 4-D spatial op also accept ``C x H x W`` inputs."""

    def wrapper(x: Tensor, *args, **kwargs):
        if x.ndim == 3:
            out = fn(reshape(x, (1,) + x.shape), *args, **kwargs)
            return reshape(out, out.shape[1:])
        if x.ndim != 4:
            raise ShapeError(f"{fn.__name__}: expected 3-D or 4-D input, got shape {x.shape}")
        return fn(x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_batched
def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, groups: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with stride, dilation, zero padding and channel groups."""
    kw = dict(stride=stride, padding=padding, dilation=dilation, groups=groups)
    if bias is None:
        return Conv2d.apply(x, w, **kw)
    return Conv2d.apply(x, w, bias, **kw)


class AvgPool2d(Function):
    def forward(self, x, stride=1):
        n, c, h, w = x.shape
        if stride < 1 or h % stride or w % stride:
            raise ConfigError(f"avg_pool2d: spatial size {h}x{w} not divisible by {stride}")
        self.stride, self.shape = stride, x.shape
        return x.reshape(n, c, h // stride, stride, w // stride, stride).mean(axis=(3, 5))

    def backward(self, g):
        s = self.stride
        return np.repeat(np.repeat(g, s, axis=2), s, axis=3) / (s * s)


@_batched
def avg_pool2d(x: Tensor, stride: int) -> Tensor:
    """Non-overlapping ``stride x stride`` mean pooling."""
    return AvgPool2d.apply(x, stride=int(stride))


def bilinear_matrix(size: int, factor: int, dtype=np.float64) -> np.ndarray:
    """``(factor*size) x size`` interpolation matrix, half-pixel (align_corners=False) centres."""
    out = factor * size
    src = (np.arange(out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), size - 1)
    i1 = np.minimum(i0 + 1, size - 1)
    lam = src - i0
    m = np.zeros((out, size), dtype=dtype)
    rows = np.arange(out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


_interp_cache: dict = {}


def _interp(size, factor, dtype):
    key = (size, factor, np.dtype(dtype).str)
    m = _interp_cache.get(key)
    if m is None:
        m = _interp_cache[key] = bilinear_matrix(size, factor).astype(dtype)
    return m


class UpsampleBilinear(Function):
    def forward(self, x, factor=1):
        _, _, h, w = x.shape
        self.mh = _interp(h, factor, x.dtype)
        self.mw = _interp(w, factor, x.dtype)
        return np.matmul(self.mh, np.matmul(x, self.mw.T))

    def backward(self, g):
        return np.matmul(self.mh.T, np.matmul(g, self.mw))


@_batched
def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Integer-factor bilinear upsampling; factor 1 returns the input unchanged."""
    if factor < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    return UpsampleBilinear.apply(x, factor=int(factor))


# ---------------------------------------------------------------------------
# gradient oracle


def grad_check(f: Callable[..., Tensor], x, eps: float = 1e-5, max_coords: int | None = None,
               rng: Rng | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``x`` is a tensor or a list of tensors; ``f`` is called with no arguments
    when ``x`` is a list (it closes over the tensors) and with ``x`` otherwise.
    The tensors are cast to float64 in place and ``f`` runs with float64 as
    the default dtype. ``max_coords`` caps the number of probed coordinates per
    tensor (sampled with ``rng``).
    """
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)
    call = (lambda: f(x)) if single else f
    rng = rng or Rng(0)
    with default_dtype(np.float64):
        for t in xs:
            t.data = t.data.astype(np.float64)
            t.requires_grad = True
            t.grad = None
        out = call()
        if out.size != 1:
            raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
        out.backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in xs]
        worst = 0.0
        with no_grad():
            for t, a in zip(xs, analytic):
                flat = t.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
                a_flat = a.reshape(-1)
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = call().data.item()
                    flat[i] = orig - eps
                    fm = call().data.item()
                    flat[i] = orig
                    num = (fp - fm) / (2 * eps)
                    an = float(a_flat[i])
                    err = abs(an - num) / max(1e-8, abs(an) + abs(num))
                    worst = max(worst, err)
    return worst


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]
