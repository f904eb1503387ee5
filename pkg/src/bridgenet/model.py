"""Full multi-task network: encoder, preliminary decoders, TPP, BFE, TFR, heads.

Scales are indexed finest first (index 0 has the smallest stride).  The same
:class:`BridgeNet` class also provides the shared-encoder multi-decoder
baseline (all interaction modules disabled) and single-task models (one task).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import losses
from .bfe import BfeConfig, BfeModule
from .nn import Conv2d, Module
from .tensor import ConfigError, Rng, Tensor, add, concat, gelu, upsample_bilinear
from .tfr import TFR_DEPTHS, TfrConfig, TfrStack
from .tpp import TppConfig, TppModule


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str  # categorical | regression | normals | binary
    channels: int
    metric: str
    lower_is_better: bool

    def __post_init__(self):
        expected = {"categorical": "miou", "regression": "rmse", "normals": "merr", "binary": "odsf"}
        if self.kind not in expected:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.metric not in (expected[self.kind], "maxf" if self.kind == "binary" else None):
            raise ValueError(f"metric {self.metric!r} inconsistent with kind {self.kind!r}")
        if self.lower_is_better != (self.metric in ("rmse", "merr")):
            raise ValueError(f"lower_is_better inconsistent with metric {self.metric!r}")


def standard_task(name: str, num_classes: int = 4) -> TaskSpec:
    if name == "seg":
        return TaskSpec("seg", "categorical", num_classes, "miou", False)
    if name == "depth":
        return TaskSpec("depth", "regression", 1, "rmse", True)
    if name == "normals":
        return TaskSpec("normals", "normals", 3, "merr", True)
    if name == "edges":
        return TaskSpec("edges", "binary", 1, "odsf", False)
    raise ValueError(f"unknown task {name!r}")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    strides: tuple = (4, 8, 16)
    channels: int = 32
    tasks: tuple = ("seg", "depth")
    num_classes: int = 4
    tfr_depth: int = TFR_DEPTHS["base"]
    heads: int = 2
    query_downsample: int = 2
    kv_downsample: tuple = (8, 4, 2)
    use_tpp: bool = True
    use_bfe: bool = True
    use_tfr: bool = True
    seed: int = 0

    def __post_init__(self):
        strides = tuple(self.strides)
        if any(b != 2 * a for a, b in zip(strides[:-1], strides[1:])) or strides[0] < 2 or strides[0] & (strides[0] - 1):
            raise ConfigError(f"strides must be successive powers of two, got {strides}")
        if len(self.kv_downsample) != len(strides):
            raise ConfigError("one key/value downsample ratio per scale is required")
        for s, l in zip(strides, self.kv_downsample):
            fs = self.image_size // s
            if self.image_size % s or fs % l or fs % self.query_downsample:
                raise ConfigError(
                    f"image size {self.image_size} incompatible with stride {s}, "
                    f"query downsample {self.query_downsample} and key/value downsample {l}"
                )
        if not self.tasks:
            raise ConfigError("at least one task is required")

    @property
    def task_specs(self) -> list:
        return [standard_task(t, self.num_classes) for t in self.tasks]

    @property
    def variant(self) -> str:
        if not (self.use_tpp or self.use_bfe or self.use_tfr):
            return "stl" if len(self.tasks) == 1 else "mtl_baseline"
        return "bridgenet"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        for key in ("strides", "tasks", "kv_downsample"):
            d[key] = tuple(d[key])
        return cls(**d)

    def baseline(self) -> "ModelConfig":
        return replace(self, use_tpp=False, use_bfe=False, use_tfr=False)

    def single_task(self, task: str) -> "ModelConfig":
        return replace(self.baseline(), tasks=(task,))


@dataclass
class TaskFeatureSet:
    feats: list  # [task][scale] -> B x C_p x h x w
    initial: list  # [task][scale] -> B x channels x h x w


class PyramidEncoder(Module):
    """Strided 3x3 conv stem plus one downsampling stage per extra scale."""

    def __init__(self, channels: int, strides, rng: Rng):
        n_stem = int(np.log2(strides[0]))
        widths = [max(channels // 2 ** (n_stem - 1 - i), 8) for i in range(n_stem)]
        widths[-1] = channels
        chans = [3] + widths
        self.stem = [Conv2d(a, b, 3, rng, stride=2, padding=1) for a, b in zip(chans[:-1], chans[1:])]
        self.first = Conv2d(channels, channels, 3, rng, padding=1)
        self.stages = [Conv2d(channels, channels, 3, rng, stride=2, padding=1) for _ in strides[1:]]

    def forward(self, image):
        return encode(self, image)


def encode(enc: PyramidEncoder, image: Tensor) -> list:
    """Feature pyramid, finest scale first."""
    x = image
    for conv in enc.stem:
        x = gelu(conv(x))
    x = gelu(enc.first(x))
    pyramid = [x]
    for conv in enc.stages:
        x = gelu(conv(x))
        pyramid.append(x)
    return pyramid


class PreliminaryDecoder(Module):
    """Per-scale 3x3 conv block and 1x1 initial head for one task."""

    def __init__(self, channels: int, out_channels: int, num_scales: int, rng: Rng):
        self.blocks = [Conv2d(channels, channels, 3, rng, padding=1) for _ in range(num_scales)]
        self.heads = [Conv2d(channels, out_channels, 1, rng) for _ in range(num_scales)]


class BridgeNet(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = Rng(cfg.seed)
        c, n, specs = cfg.channels, len(cfg.strides), cfg.task_specs
        t = len(specs)
        self.encoder = PyramidEncoder(c, cfg.strides, rng.child(0))
        drng = rng.child(1)
        self.decoders = [PreliminaryDecoder(c, s.channels, n, drng) for s in specs]
        self.upsamplers = [Conv2d(c, c, 1, rng.child(2)) for _ in range(n - 1)]
        arng = rng.child(3)
        self.fuse = [Conv2d(n * c, c, 1, arng) for _ in specs]
        self.heads = [Conv2d(c, s.channels, 1, arng) for s in specs]
        self.tpp = TppModule(TppConfig(t, c, c, cfg.heads), rng.child(4)) if cfg.use_tpp else None
        self.bfe = (
            [BfeModule(BfeConfig(c, c, c, l, cfg.query_downsample, cfg.heads), rng.child(5))
             for l in cfg.kv_downsample]
            if cfg.use_bfe else None
        )
        self.tfr = (
            [[TfrStack(TfrConfig(cfg.tfr_depth, c, c), rng.child(6)) for _ in specs] for _ in range(n)]
            if cfg.use_tfr else None
        )

    @property
    def task_specs(self):
        return self.cfg.task_specs

    def forward(self, image):
        return bridgenet_forward(self, image)

    def interaction_parameters(self) -> dict:
        """Parameter counts of the three interaction modules."""
        count = lambda ms: int(sum(m.num_parameters() for m in ms))  # noqa: E731
        return {
            "tpp": self.tpp.num_parameters() if self.tpp else 0,
            "bfe": count(self.bfe) if self.bfe else 0,
            "tfr": count([s for row in self.tfr for s in row]) if self.tfr else 0,
        }


def preliminary_decode(model: BridgeNet, pyramid: list, use_tpp: bool | None = None) -> TaskFeatureSet:
    use_tpp = model.cfg.use_tpp if use_tpp is None else use_tpp
    n = len(pyramid)
    feats = [[gelu(dec.blocks[i](pyramid[i])) for i in range(n)] for dec in model.decoders]
    if use_tpp:
        if model.tpp is None:
            raise ConfigError("model was built without TPP")
        coarse = model.tpp([f[-1] for f in feats])
        for j, p in enumerate(coarse):
            feats[j][-1] = p
    initial = [[dec.heads[i](feats[j][i]) for i in range(n)] for j, dec in enumerate(model.decoders)]
    return TaskFeatureSet(feats, initial)


def _aggregate(model: BridgeNet, refined: list) -> dict:
    cfg = model.cfg
    out = {}
    for j, spec in enumerate(model.task_specs):
        ups = [upsample_bilinear(r, 2**i) for i, r in enumerate(refined[j])]
        fused = gelu(model.fuse[j](concat(ups, axis=1)))
        out[spec.name] = upsample_bilinear(model.heads[j](fused), cfg.strides[0])
    return out


def _top_down(model: BridgeNet, p: Tensor, finer_scale: int, coarser: Tensor | None) -> Tensor:
    if coarser is None:
        return p
    return add(p, model.upsamplers[finer_scale](upsample_bilinear(coarser, 2)))


def bridgenet_forward(model: BridgeNet, image: Tensor) -> dict:
    """Final predictions at image resolution plus per-scale initial predictions.

    Returns ``{"final": {task: B x ch x H x W}, "initial": {task: [per scale]}}``.
    """
    cfg = model.cfg
    pyramid = encode(model.encoder, image)
    tfs = preliminary_decode(model, pyramid)
    n, t = len(pyramid), len(model.task_specs)
    refined = [[None] * n for _ in range(t)]
    for i in reversed(range(n)):
        s_i = pyramid[i]
        p_i = [tfs.feats[j][i] for j in range(t)]
        bridge = model.bfe[i](s_i, p_i) if cfg.use_bfe else s_i
        for j in range(t):
            coarser = refined[j][i + 1] if i + 1 < n else None
            p_hat = _top_down(model, p_i[j], i, coarser)
            if cfg.use_tfr:
                refined[j][i] = model.tfr[i][j](bridge, p_hat)
            elif cfg.use_bfe:
                refined[j][i] = add(p_hat, bridge)
            else:
                refined[j][i] = p_hat
    final = _aggregate(model, refined)
    initial = {spec.name: tfs.initial[j] for j, spec in enumerate(model.task_specs)}
    return {"final": final, "initial": initial}


def baseline_forward(model: BridgeNet, image: Tensor) -> dict:
    """Shared encoder and per-task decoders with top-down fusion; no cross-task modules."""
    pyramid = encode(model.encoder, image)
    n = len(pyramid)
    final, initial = {}, {}
    per_task = []
    for j, (spec, dec) in enumerate(zip(model.task_specs, model.decoders)):
        feats = [gelu(dec.blocks[i](pyramid[i])) for i in range(n)]
        initial[spec.name] = [dec.heads[i](feats[i]) for i in range(n)]
        per_task.append(feats)
    refined = [[None] * n for _ in per_task]
    for i in reversed(range(n)):
        for j, feats in enumerate(per_task):
            coarser = refined[j][i + 1] if i + 1 < n else None
            refined[j][i] = _top_down(model, feats[i], i, coarser)
    final = _aggregate(model, refined)
    return {"final": final, "initial": initial}


# ---------------------------------------------------------------------------
# targets and losses


def downsample_target(kind: str, target: np.ndarray, mask: np.ndarray, factor: int):
    """Reduce a batched target map (``B x [C x] H x W``) by ``factor`` for deep supervision.

    Nearest for labels, box mean for regression (renormalised for normals),
    max for binary maps.  The mask keeps a cell only when all its pixels are valid.
    """
    if factor == 1:
        return target, mask
    b, h, w = mask.shape
    hh, ww = h // factor, w // factor
    m = mask.reshape(b, hh, factor, ww, factor).all(axis=(2, 4))
    if kind == "categorical":
        c = factor // 2
        return target[:, c::factor, c::factor], mask[:, c::factor, c::factor]
    if kind == "binary":
        return target.reshape(b, 1, hh, factor, ww, factor).max(axis=(3, 5)), m
    ch = target.shape[1]
    t = target.reshape(b, ch, hh, factor, ww, factor).mean(axis=(3, 5))
    if kind == "normals":
        t = t / np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-8)
    return t, m


def task_loss(spec: TaskSpec, pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    if spec.kind == "categorical":
        labels = np.where(mask, target, losses.IGNORE_INDEX)
        return losses.cross_entropy(pred, labels)
    if spec.kind == "regression":
        return losses.masked_l1(pred, target, mask[:, None])
    if spec.kind == "normals":
        return losses.cosine_loss(pred, target, mask)
    return losses.weighted_bce(pred, target, mask[:, None])


def compute_losses(model_or_specs, preds: dict, targets: dict, masks: dict):
    """Total loss (final + every initial prediction, unit weights) and a breakdown.

    ``targets[name]`` / ``masks[name]`` hold full-resolution batched arrays.
    The breakdown maps ``"<task>"`` to the final term and ``"<task>/s<i>"`` to
    the deep-supervision term at scale ``i``.
    """
    specs = model_or_specs.task_specs if hasattr(model_or_specs, "task_specs") else model_or_specs
    total = None
    breakdown = {}
    h = None
    for spec in specs:
        tgt, msk = targets[spec.name], masks[spec.name]
        h = msk.shape[-2]
        final = preds["final"][spec.name]
        term = task_loss(spec, final, tgt, msk)
        breakdown[spec.name] = term.item()
        total = term if total is None else add(total, term)
        for i, init in enumerate(preds.get("initial", {}).get(spec.name, [])):
            factor = h // init.shape[-2]
            t_i, m_i = downsample_target(spec.kind, tgt, msk, factor)
            term = task_loss(spec, init, t_i, m_i)
            breakdown[f"{spec.name}/s{i}"] = term.item()
            total = add(total, term)
    return total, breakdown


def task_losses(breakdown: dict) -> dict:
    """Sum the breakdown per task (final + deep supervision)."""
    out: dict = {}
    for key, val in breakdown.items():
        name = key.split("/")[0]
        out[name] = out.get(name, 0.0) + val
    return out


def build_model(cfg: ModelConfig) -> BridgeNet:
    return BridgeNet(cfg)


def forward(model: BridgeNet, image: Tensor) -> dict:
    """Dispatch on the configured variant."""
    if model.cfg.variant == "bridgenet":
        return bridgenet_forward(model, image)
    return baseline_forward(model, image)
