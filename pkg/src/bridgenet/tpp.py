"""Task pattern propagation at the coarsest scale.

Each task computes its own multi-head self-attention logits.  The logits of
all tasks are stacked as channels, mixed by a 1x1 convolution into one shared
pattern map, normalised with a softmax and used to aggregate every task's
values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .nn import Conv2d, FfnBlock, LinearProj, Module
from .tensor import (
    Rng,
    ShapeError,
    Tensor,
    add,
    concat,
    flatten_spatial,
    matmul,
    permute,
    reshape,
    scale,
    softmax_lastdim,
    unflatten_spatial,
)


@dataclass(frozen=True)
class TppConfig:
    num_tasks: int
    channels: int
    attn_dim: int
    heads: int = 2

    def __post_init__(self):
        if self.num_tasks < 1:
            raise ValueError("TPP needs at least one task")
        if self.attn_dim % self.heads:
            raise ValueError(f"attention dim {self.attn_dim} not divisible by {self.heads} heads")


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``B x N x C`` -> ``B x h x N x C/h``."""
    b, n, c = x.shape
    return permute(reshape(x, (b, n, heads, c // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """``B x h x N x d`` -> ``B x N x (h*d)``."""
    b, h, n, d = x.shape
    return reshape(permute(x, (0, 2, 1, 3)), (b, n, h * d))


class TppModule(Module):
    def __init__(self, cfg: TppConfig, rng: Rng):
        self.cfg = cfg
        t, cp, ca, h = cfg.num_tasks, cfg.channels, cfg.attn_dim, cfg.heads
        self.q = [LinearProj(cp, ca, rng) for _ in range(t)]
        # No key or squeeze bias: both add a per-row constant before the softmax.
        self.k = [LinearProj(cp, ca, rng, bias=False) for _ in range(t)]
        self.v = [LinearProj(cp, ca, rng) for _ in range(t)]
        self.squeeze = Conv2d(t * h, h, 1, rng, bias=False)
        self.merge = [LinearProj(ca, cp, rng) for _ in range(t)]
        self.ffn = [FfnBlock(cp, rng) for _ in range(t)]

    def forward(self, feats):
        return tpp_forward(self, feats)

    def zero_outputs_(self):
        """Zero the merge projections and FFN output layers (identity map)."""
        for m in self.merge:
            m.zero_()
        for f in self.ffn:
            f.fc2.zero_()
        return self


def task_attention(m: TppModule, p_j: Tensor, j: int):
    """Raw scaled attention logits and values for task ``j``.

    Returns ``(A_j, V_j)`` with shapes ``B x h x N x N`` and ``B x h x N x C_a/h``.
    No softmax is applied here.
    """
    if not 0 <= j < m.cfg.num_tasks:
        raise IndexError(f"task index {j} out of range for {m.cfg.num_tasks} tasks")
    tokens = flatten_spatial(p_j)
    h = m.cfg.heads
    q = split_heads(m.q[j](tokens), h)
    k = split_heads(m.k[j](tokens), h)
    v = split_heads(m.v[j](tokens), h)
    a = scale(matmul(q, k.transpose(-1, -2)), 1.0 / math.sqrt(m.cfg.attn_dim))
    return a, v


def shared_pattern(m: TppModule, attn) -> Tensor:
    """Softmax of the squeezed task-stacked logits, ``B x h x N x N``."""
    if len(attn) != m.cfg.num_tasks:
        raise ShapeError(f"expected {m.cfg.num_tasks} attention maps, got {len(attn)}")
    stacked = concat(list(attn), axis=1)  # channel index = task * h + head
    return softmax_lastdim(m.squeeze(stacked))


def pattern_propagate(m: TppModule, attn, values) -> list:
    """Propagate the shared pattern to each task's values; returns ``B x N x C_p`` per task."""
    if len(values) != m.cfg.num_tasks:
        raise ShapeError(f"expected {m.cfg.num_tasks} value tensors, got {len(values)}")
    pattern = shared_pattern(m, attn)
    return [m.merge[j](merge_heads(matmul(pattern, v))) for j, v in enumerate(values)]


def tpp_forward(m: TppModule, feats) -> list:
    """Task-specific maps in, same-shaped task-specific maps out."""
    feats = list(feats)
    if not feats:
        raise ShapeError("tpp_forward needs at least one task feature")
    if len(feats) != m.cfg.num_tasks:
        raise ShapeError(f"expected {m.cfg.num_tasks} task features, got {len(feats)}")
    shape = feats[0].shape
    if any(f.shape != shape for f in feats):
        raise ShapeError(f"task features differ in shape: {[f.shape for f in feats]}")
    _, _, hh, ww = shape
    pairs = [task_attention(m, p, j) for j, p in enumerate(feats)]
    xs = pattern_propagate(m, [a for a, _ in pairs], [v for _, v in pairs])
    out = []
    for j, (p, x) in enumerate(zip(feats, xs)):
        tokens = add(flatten_spatial(p), x)
        tokens = m.ffn[j](tokens)
        out.append(unflatten_spatial(tokens, hh, ww))
    return out
