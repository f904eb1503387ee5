"""Finite-difference gradient checks for every interaction block and the full model."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bfe import BfeConfig, BfeModule, bfe_forward
from .model import BridgeNet, ModelConfig, forward
from .nn import FfnBlock, HdcBlock, ffn_forward, hdc_forward
from .tensor import Rng, Tensor, default_dtype, grad_check, mul, tsum
from .tfr import TfrConfig, TfrStack, tfr_forward
from .tpp import TppConfig, TppModule, tpp_forward

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    block: str
    max_rel_error: float
    coords: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < TOLERANCE


def _probe(out, rng: Rng):
    """Scalar ``sum(out * W)`` with fixed random ``W`` so every output element matters."""
    outs = out if isinstance(out, (list, tuple)) else [out]
    weights = [Tensor(rng.normal(size=o.shape)) for o in outs]

    def f(values):
        vs = values if isinstance(values, (list, tuple)) else [values]
        total = None
        for v, w in zip(vs, weights):
            s = tsum(mul(v, w))
            total = s if total is None else T.add(total, s)
        return total
    return f


def _run(name, module, inputs, fn, rng: Rng, max_coords):
    module.astype(np.float64)
    with default_dtype(np.float64):
        inputs = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
        probe = _probe(fn(*inputs), rng.child(1))
    tensors = inputs + module.parameters()
    err = grad_check(lambda: probe(fn(*inputs)), tensors, max_coords=max_coords, rng=rng.child(2))
    coords = sum(min(t.size, max_coords or t.size) for t in tensors)
    return CheckResult(name, err, coords)


def check_ffn(rng: Rng, max_coords=None) -> CheckResult:
    m = FfnBlock(6, rng.child(0))
    x = rng.normal(size=(2, 5, 6))
    return _run("ffn", m, [x], lambda x: ffn_forward(m, x), rng, max_coords)


def check_hdc(rng: Rng, max_coords=None) -> CheckResult:
    m = HdcBlock(4, 4, rng.child(0))
    x = rng.normal(size=(1, 4, 8, 8))
    return _run("hdc", m, [x], lambda x: hdc_forward(m, x), rng, max_coords)


def check_tpp(rng: Rng, max_coords=None) -> CheckResult:
    m = TppModule(TppConfig(num_tasks=2, channels=4, attn_dim=4, heads=2), rng.child(0))
    xs = [rng.normal(size=(1, 4, 3, 3)) for _ in range(2)]
    return _run("tpp", m, xs, lambda a, b: tpp_forward(m, [a, b]), rng, max_coords)


def check_bfe(rng: Rng, max_coords=None) -> CheckResult:
    m = BfeModule(BfeConfig(generic_channels=4, specific_channels=4, attn_dim=4, kv_downsample=2,
                            query_downsample=2), rng.child(0))
    s = rng.normal(size=(1, 4, 8, 8))
    ps = [rng.normal(size=(1, 4, 8, 8)) for _ in range(2)]
    return _run("bfe", m, [s] + ps, lambda s, a, b: bfe_forward(m, s, [a, b]), rng, max_coords)


def check_tfr(rng: Rng, max_coords=None) -> CheckResult:
    m = TfrStack(TfrConfig(depth=2, bridge_channels=4, task_channels=4), rng.child(0))
    b = rng.normal(size=(1, 4, 8, 8))
    x = rng.normal(size=(1, 4, 8, 8))
    return _run("tfr", m, [b, x], lambda b, x: tfr_forward(m, b, x), rng, max_coords)


GRADCHECK_MODEL = ModelConfig(image_size=16, channels=8, tasks=("seg", "depth"), num_classes=3,
                              tfr_depth=2, query_downsample=1, kv_downsample=(1, 1, 1))


def check_model(rng: Rng, max_coords=4) -> CheckResult:
    """Full two-task model at 16x16, deep-supervision outputs included.

    The scalar is ``sum(out - out0)`` over every prediction, with ``out0`` the
    outputs at the check point. Without a constant offset, the central
    difference resolves gradients roughly ten times smaller than with the
    training loss. The input is drawn at three times unit scale so that signal
    reaches the coarse-scale blocks.
    """
    cfg = GRADCHECK_MODEL
    m = BridgeNet(cfg).astype(np.float64)
    with default_dtype(np.float64):
        img = Tensor(3.0 * rng.normal(size=(1, 3, cfg.image_size, cfg.image_size)), requires_grad=True)

        def outputs():
            out = forward(m, img)
            flat = []
            for task in cfg.tasks:
                flat.append(out["final"][task])
                flat.extend(out["initial"][task])
            return flat

        with T.no_grad():
            base = [Tensor(-o.data) for o in outputs()]

    def probe():
        total = None
        for o, b in zip(outputs(), base):
            s = tsum(T.add(o, b))
            total = s if total is None else T.add(total, s)
        return total

    tensors = [img] + m.parameters()
    err = grad_check(probe, tensors, max_coords=max_coords, rng=rng.child(2))
    return CheckResult("model", err, sum(min(t.size, max_coords) for t in tensors))


BLOCKS = {
    "tpp": check_tpp,
    "bfe": check_bfe,
    "tfr": check_tfr,
    "hdc": check_hdc,
    "ffn": check_ffn,
    "model": check_model,
}


def run_checks(blocks=None, seed: int = 0) -> list:
    names = list(BLOCKS) if not blocks else list(blocks)
    for n in names:
        if n not in BLOCKS:
            raise KeyError(f"unknown block {n!r}; choose from {sorted(BLOCKS)}")
    keys = list(BLOCKS)
    return [BLOCKS[n](Rng((seed, keys.index(n)))) for n in names]


FAULT_TARGETS = {
    "gelu": T.GELU,
    "softmax": T.SoftmaxLast,
    "layernorm": T.LayerNorm,
    "conv": T.Conv2d,
    "upsample": T.UpsampleBilinear,
    "matmul": T.MatMul,
}


@contextmanager
def inject_backward_fault(op: str, factor: float = 1.1):
    """Temporarily scale the backward rule of ``op`` so checks relying on it fail."""
    cls = FAULT_TARGETS[op]
    original = cls.backward

    def wrong(self, g):
        grads = original(self, g)
        if isinstance(grads, tuple):
            return tuple(None if x is None else x * factor for x in grads)
        return grads * factor
    cls.backward = wrong
    try:
        yield
    finally:
        cls.backward = original
