"""Task feature refinement: cascaded HDC layers fed with the bridge feature."""

from __future__ import annotations

from dataclasses import dataclass

from .nn import HdcBlock, Module
from .tensor import Rng, ShapeError, Tensor, add, concat

TFR_DEPTHS = {"base": 2, "large": 4, "huge": 6}


@dataclass(frozen=True)
class TfrConfig:
    depth: int
    bridge_channels: int
    task_channels: int

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("TFR depth must be >= 1")

    @classmethod
    def named(cls, size: str, bridge_channels: int, task_channels: int) -> "TfrConfig":
        return cls(TFR_DEPTHS[size], bridge_channels, task_channels)


class TfrLayer(Module):
    """HDC over ``concat(bridge, x_prev)`` plus a skip from ``x_prev``."""

    def __init__(self, bridge_channels: int, task_channels: int, rng: Rng):
        self.hdc = HdcBlock(bridge_channels + task_channels, task_channels, rng)

    def forward(self, bridge, x_prev):
        return tfr_layer_forward(self, bridge, x_prev)

    def zero_(self):
        for conv in self.hdc.convs:
            conv.zero_()
        return self


def tfr_layer_forward(layer: TfrLayer, bridge: Tensor, x_prev: Tensor) -> Tensor:
    if bridge.shape[-2:] != x_prev.shape[-2:]:
        raise ShapeError(f"bridge {bridge.shape} and task feature {x_prev.shape} not aligned")
    return add(x_prev, layer.hdc.branch(concat([bridge, x_prev], axis=1)))


class TfrStack(Module):
    def __init__(self, cfg: TfrConfig, rng: Rng):
        self.cfg = cfg
        self.layers = [TfrLayer(cfg.bridge_channels, cfg.task_channels, rng) for _ in range(cfg.depth)]

    def forward(self, bridge, feat):
        return tfr_forward(self, bridge, feat)


def tfr_forward(stack: TfrStack, bridge: Tensor, feat: Tensor, return_all: bool = False):
    if not stack.layers:
        raise ValueError("TFR stack has no layers")
    x = feat
    history = []
    for layer in stack.layers:
        x = tfr_layer_forward(layer, bridge, x)
        history.append(x)
    return history if return_all else x
