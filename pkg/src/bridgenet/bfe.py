"""Bridge feature extraction: generic tokens cross-attend to all task tokens."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, FfnBlock, LinearProj, Module
from .tensor import (
    ConfigError,
    Rng,
    ShapeError,
    Tensor,
    add,
    avg_pool2d,
    concat,
    flatten_spatial,
    matmul,
    scale,
    softmax_lastdim,
    unflatten_spatial,
    upsample_bilinear,
)
from .tpp import merge_heads, split_heads


@dataclass(frozen=True)
class BfeConfig:
    generic_channels: int
    specific_channels: int
    attn_dim: int
    kv_downsample: int
    query_downsample: int = 2
    heads: int = 2

    def __post_init__(self):
        if self.attn_dim != self.generic_channels:
            raise ShapeError(
                f"attention dim {self.attn_dim} must equal generic channels "
                f"{self.generic_channels} for the identity residual"
            )
        if self.attn_dim % self.heads:
            raise ValueError(f"attention dim {self.attn_dim} not divisible by {self.heads} heads")

    def attention_shape(self, hs, ws, hp, wp, num_tasks) -> tuple:
        d, l = self.query_downsample, self.kv_downsample
        return (hs * ws // (d * d), num_tasks * hp * wp // (l * l))


class BfeModule(Module):
    def __init__(self, cfg: BfeConfig, rng: Rng):
        self.cfg = cfg
        cs, cp, ca, d = cfg.generic_channels, cfg.specific_channels, cfg.attn_dim, cfg.query_downsample
        self.tokenizer = Conv2d(cs, cs, d, rng, stride=d, groups=cs)
        if d == 1:
            self.tokenizer.weight.data[...] = 1.0
        self.q = LinearProj(cs, ca, rng)
        self.k = LinearProj(cp, ca, rng, bias=False)  # a key bias cancels in the softmax
        self.v = LinearProj(cp, ca, rng)
        self.ffn = FfnBlock(ca, rng)

    def forward(self, generic, specific, return_attention: bool = False):
        return bfe_forward(self, generic, specific, return_attention=return_attention)

    def zero_outputs_(self):
        self.ffn.fc2.zero_()
        return self


def tokenize_generic(m: BfeModule, s: Tensor) -> Tensor:
    """Strided depthwise conv then flatten: ``B x (H W / d^2) x C_s``."""
    d = m.cfg.query_downsample
    if s.shape[-1] % d or s.shape[-2] % d:
        raise ConfigError(f"generic map {s.shape[-2:]} not divisible by query downsample {d}")
    return flatten_spatial(m.tokenizer(s))


def tokenize_specific(m: BfeModule, feats, l: int | None = None) -> Tensor:
    """Average-pool every task map by ``l``, flatten, and join along the token axis."""
    feats = list(feats)
    l = m.cfg.kv_downsample if l is None else l
    shape = feats[0].shape
    if any(f.shape != shape for f in feats):
        raise ShapeError(f"task maps differ in shape: {[f.shape for f in feats]}")
    if shape[-1] % l or shape[-2] % l:
        raise ConfigError(f"task map {shape[-2:]} not divisible by key/value downsample {l}")
    return concat([flatten_spatial(avg_pool2d(f, l)) for f in feats], axis=1)


def bfe_forward(m: BfeModule, s: Tensor, feats, return_attention: bool = False):
    """Bridge feature ``S'`` with the same shape as ``s``.

    With ``return_attention`` the softmax-normalised attention
    (``B x h x N_q x N_kv``) is returned alongside.
    """
    cfg = m.cfg
    if s.shape[1] != cfg.generic_channels:
        raise ShapeError(f"generic channels {s.shape[1]} != {cfg.generic_channels}")
    _, _, hs, ws = s.shape
    d = cfg.query_downsample
    q = split_heads(m.q(tokenize_generic(m, s)), cfg.heads)
    kv_tokens = tokenize_specific(m, feats)
    k = split_heads(m.k(kv_tokens), cfg.heads)
    v = split_heads(m.v(kv_tokens), cfg.heads)
    logits = scale(matmul(q, k.transpose(-1, -2)), 1.0 / math.sqrt(cfg.attn_dim))
    attn = softmax_lastdim(logits)
    x = merge_heads(matmul(attn, v))
    x = upsample_bilinear(unflatten_spatial(x, hs // d, ws // d), d)
    out = add(s, m.ffn.branch_map(x))
    if return_attention:
        return out, attn
    return out


def count_tokens(hs, ws, hp, wp, num_tasks, d, l) -> tuple:
    """Token counts (queries, keys) by direct enumeration of the pooled grids."""
    nq = len(np.arange(0, hs, d)) * len(np.arange(0, ws, d))
    nk = num_tasks * len(np.arange(0, hp, l)) * len(np.arange(0, wp, l))
    return nq, nk
