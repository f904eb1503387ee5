"""Training loop, evaluation, checkpoints and the key-value run config."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import data as D
from .metrics import AngleSums, ConfusionMatrix, ErrorSums, MetricsReport, TaskResult, ods_counts, max_f_counts
from .model import BridgeNet, ModelConfig, compute_losses, forward, task_losses
from .optim import OptimConfig, Optimizer, poly_lr
from .tensor import Rng, Tensor, no_grad
from .tfr import TFR_DEPTHS


class NonFiniteLossError(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration
        self.value = value


class RunConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # scene
    image_size: int = 64
    min_shapes: int = 2
    max_shapes: int = 4
    num_classes: int = 4
    depth_near: float = 1.0
    depth_far: float = 1.1
    noise: float = 0.02
    n_train: int = 64
    n_val: int = 16
    # model
    tasks: tuple = ("seg", "depth")
    channels: int = 32
    tfr: str = "base"
    heads: int = 2
    query_downsample: int = 2
    kv_downsample: tuple = (8, 4, 2)
    # optimisation
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.05
    poly_power: float = 0.9
    iters: int = 2000
    batch_size: int = 4
    eval_interval: int = 0
    checkpoint_interval: int = 0
    # run
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs"

    def scene(self) -> D.SceneConfig:
        return D.SceneConfig(image_size=self.image_size, min_shapes=self.min_shapes,
                             max_shapes=self.max_shapes, num_classes=self.num_classes,
                             depth_near=self.depth_near, depth_far=self.depth_far,
                             noise=self.noise, seed=self.seed)

    def model(self, variant: str = "bridgenet", ablate=(), task: str | None = None) -> ModelConfig:
        if self.tfr not in TFR_DEPTHS:
            raise RunConfigError(f"tfr must be one of {sorted(TFR_DEPTHS)}, got {self.tfr!r}")
        cfg = ModelConfig(image_size=self.image_size, channels=self.channels, tasks=tuple(self.tasks),
                          num_classes=self.num_classes, tfr_depth=TFR_DEPTHS[self.tfr], heads=self.heads,
                          query_downsample=self.query_downsample, kv_downsample=tuple(self.kv_downsample),
                          seed=self.seed)
        if variant == "bridgenet":
            return replace(cfg, use_tpp="tpp" not in ablate, use_bfe="bfe" not in ablate,
                           use_tfr="tfr" not in ablate)
        if variant == "mtl_baseline":
            return cfg.baseline()
        if variant == "stl":
            if task is None:
                raise RunConfigError("stl variant needs a task")
            return cfg.single_task(task)
        raise RunConfigError(f"unknown variant {variant!r}")

    def optim(self) -> OptimConfig:
        return OptimConfig(kind=self.optimizer, lr=self.lr, weight_decay=self.weight_decay,
                           total_iters=self.iters, power=self.poly_power)


_TUPLE_KEYS = {"tasks": str, "kv_downsample": int}


def parse_run_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment); unknown keys are rejected."""
    base = base or RunConfig()
    types = {f.name: type(getattr(base, f.name)) for f in fields(RunConfig)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise RunConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in types:
            raise RunConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            if key in _TUPLE_KEYS:
                updates[key] = tuple(_TUPLE_KEYS[key](v.strip()) for v in val.split(",") if v.strip())
            else:
                updates[key] = types[key](val)
        except ValueError as exc:
            raise RunConfigError(f"line {lineno}: bad value for {key!r}: {val!r}") from exc
    return replace(base, **updates)


def load_run_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise RunConfigError(f"config file not found: {path}")
    return parse_run_config(p.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: BridgeNet
    log: list  # (iteration, lr, total, {task: loss})

    @property
    def initial_loss(self) -> float:
        return self.log[0][2]

    @property
    def final_loss(self) -> float:
        return self.log[-1][2]


def format_log_line(it: int, lr: float, total: float, per_task: dict) -> str:
    cells = [str(it), f"{lr:.6g}", f"{total:.6f}"] + [f"{v:.6f}" for v in per_task.values()]
    return "\t".join(cells)


def train(model: BridgeNet, samples: list, optim_cfg: OptimConfig, iters: int, batch_size: int = 4,
          seed: int = 0, overfit_one_batch: bool = False, log_fn=None, checkpoint_fn=None,
          checkpoint_interval: int = 0, eval_fn=None, eval_interval: int = 0) -> TrainResult:
    """Minimise the deep-supervised multi-task loss with a poly-decayed optimiser."""
    tasks = [s.name for s in model.task_specs]
    rng = Rng((seed, 77))
    opt = Optimizer(model.parameters(), replace(optim_cfg, total_iters=iters))
    order = []
    fixed = None
    if overfit_one_batch:
        fixed = D.collate(samples[:batch_size], tasks)
    log = []
    for it in range(iters):
        if fixed is not None:
            images, targets, masks = fixed
        else:
            if len(order) < batch_size:
                order.extend(rng.permutation(len(samples)).tolist())
            idx, order = order[:batch_size], order[batch_size:]
            images, targets, masks = D.collate([samples[i] for i in idx], tasks)
        lr = poly_lr(it, opt.cfg)
        opt.zero_grad()
        preds = forward(model, Tensor(images))
        total, breakdown = compute_losses(model, preds, targets, masks)
        value = total.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(it, value)
        total.backward()
        opt.step(lr)
        entry = (it, lr, value, task_losses(breakdown))
        log.append(entry)
        if log_fn is not None:
            log_fn(format_log_line(*entry))
        if checkpoint_fn is not None and checkpoint_interval and (it + 1) % checkpoint_interval == 0:
            checkpoint_fn(it + 1, model, opt)
        if eval_fn is not None and eval_interval and (it + 1) % eval_interval == 0:
            eval_fn(it + 1, model)
    return TrainResult(model, log)


# ---------------------------------------------------------------------------
# evaluation


def predict(model: BridgeNet, images: np.ndarray, batch_size: int = 8) -> dict:
    """Per-task numpy predictions: labels, depth map, unit normals, edge probabilities."""
    out: dict = {s.name: [] for s in model.task_specs}
    with no_grad():
        for i in range(0, len(images), batch_size):
            preds = forward(model, Tensor(images[i:i + batch_size]))["final"]
            for spec in model.task_specs:
                p = preds[spec.name].data
                if spec.kind == "categorical":
                    out[spec.name].append(p.argmax(axis=1))
                elif spec.kind == "regression":
                    out[spec.name].append(p[:, 0])
                elif spec.kind == "normals":
                    out[spec.name].append(p / np.maximum(np.linalg.norm(p, axis=1, keepdims=True), 1e-8))
                else:
                    out[spec.name].append(1.0 / (1.0 + np.exp(-p[:, 0])))
    return {k: np.concatenate(v) for k, v in out.items()}


def score_predictions(specs, preds: dict, samples: list, num_classes: int, label: str = "") -> MetricsReport:
    results = []
    for spec in specs:
        name, p = spec.name, preds[spec.name]
        if spec.kind == "categorical":
            cm = ConfusionMatrix(num_classes)
            for s, q in zip(samples, p):
                cm.update(np.where(s.masks.get(name, True), q, 255), np.where(s.masks.get(name, True), s.seg, 255))
            value = cm.miou()
        elif spec.kind == "regression":
            acc = ErrorSums()
            for s, q in zip(samples, p):
                acc.update(q - s.depth, s.masks.get(name))
            value = acc.rmse()
        elif spec.kind == "normals":
            acc = AngleSums()
            for s, q in zip(samples, p):
                acc.update(q, s.normals, s.masks.get(name))
            value = acc.mean()
        else:
            gts = [s.edges for s in samples]
            counts = ods_counts(list(p), gts) if spec.metric == "odsf" else max_f_counts(list(p), gts)
            value = counts.best()
        results.append(TaskResult(name, spec.metric, float(value), spec.lower_is_better))
    return MetricsReport(results, len(samples), label)


def evaluate(model: BridgeNet, samples: list, label: str = "") -> MetricsReport:
    images = np.stack([s.image for s in samples])
    preds = predict(model, images)
    return score_predictions(model.task_specs, preds, samples, model.cfg.num_classes, label)


# ---------------------------------------------------------------------------
# checkpoints

CONFIG_KEY = "__config__"


def save_checkpoint(path, model: BridgeNet, optimizer: Optimizer | None = None):
    items = [(CONFIG_KEY, D.text_to_array(model.cfg.to_json()))]
    items += [(name, arr.astype(np.float32)) for name, arr in model.state_dict().items()]
    if optimizer is not None:
        items += [(f"optim/{k}", v) for k, v in optimizer.state_arrays().items()]
    D.write_archive(path, items)


def load_checkpoint(path, expect: ModelConfig | None = None) -> BridgeNet:
    arrs = D.read_archive(path)
    if CONFIG_KEY not in arrs:
        raise D.FormatError("checkpoint has no config header")
    cfg = ModelConfig.from_json(D.array_to_text(arrs.pop(CONFIG_KEY)))
    if expect is not None and cfg != expect:
        raise ValueError(f"checkpoint config {cfg} does not match expected {expect}")
    model = BridgeNet(cfg)
    model.load_state_dict({k: v for k, v in arrs.items() if not k.startswith("optim/")})
    return model
