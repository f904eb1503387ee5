"""SGD-momentum, Adam and AdamW with a polynomial learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OPTIMIZERS = ("sgd", "adam", "adamw")


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.05
    total_iters: int = 2000
    power: float = 0.9
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.power < 0:
            raise ValueError("poly power must be >= 0")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")


def poly_lr(step: int, cfg: OptimConfig) -> float:
    """``lr * (1 - step / total) ** power`` for ``0 <= step <= total``."""
    if not 0 <= step <= cfg.total_iters:
        raise ValueError(f"step {step} outside [0, {cfg.total_iters}]")
    return cfg.lr * (1.0 - step / cfg.total_iters) ** cfg.power


class Optimizer:
    """Per-parameter state lives in ``self.state`` keyed by parameter position."""

    def __init__(self, params, cfg: OptimConfig):
        self.params = list(params)
        self.cfg = cfg
        self.t = 0
        self.state = [dict() for _ in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.cfg.lr if lr is None else lr
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"parameter {i} has no gradient")
            optimizer_step(self.cfg, self.state[i], p, p.grad, lr, self.t)

    def state_arrays(self) -> dict:
        out = {"__step__": np.array([self.t], dtype=np.int32)}
        for i, st in enumerate(self.state):
            for k, v in st.items():
                out[f"{i}.{k}"] = v
        return out

    def load_state_arrays(self, arrs: dict):
        self.t = int(arrs["__step__"][0])
        for key, v in arrs.items():
            if key == "__step__":
                continue
            i, k = key.split(".", 1)
            self.state[int(i)][k] = v.astype(self.params[int(i)].data.dtype)


def optimizer_step(cfg: OptimConfig, state: dict, p, grad: np.ndarray, lr: float, t: int):
    """Update ``p.data`` in place for one parameter."""
    if grad is None:
        raise ValueError("missing gradient")
    if grad.shape != p.data.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {p.data.shape}")
    wd = cfg.weight_decay
    if cfg.kind == "sgd":
        g = grad + wd * p.data if wd else grad
        if cfg.momentum:
            buf = state.get("momentum")
            buf = g.copy() if buf is None else cfg.momentum * buf + g
            state["momentum"] = buf
            g = buf
        p.data -= (lr * g).astype(p.data.dtype)
        return
    b1, b2 = cfg.betas
    g = grad + wd * p.data if (cfg.kind == "adam" and wd) else grad
    m = state.get("m")
    v = state.get("v")
    m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
    v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
    state["m"], state["v"] = m, v
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    if cfg.kind == "adamw" and wd:
        p.data *= (1 - lr * wd)
    p.data -= (lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.data.dtype)
