"""Command-line entry points: gen-data, train, eval, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from .gradcheck import BLOCKS, FAULT_TARGETS, inject_backward_fault, run_checks
from .metrics import MetricsReport
from .model import ModelConfig, build_model, standard_task
from .reference_tables import TABLES
from .tensor import ConfigError
from .train import (NonFiniteLossError, RunConfig, RunConfigError, evaluate, load_checkpoint,
                    load_run_config, predict, save_checkpoint, score_predictions, train)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "BRIDGENET_THREADS"


class UsageError(Exception):
    pass


def _err(msg: str):
    print(f"error: {msg}", file=sys.stderr)


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _run_config(args) -> RunConfig:
    rc = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "tfr", None):
        updates["tfr"] = args.tfr
    if getattr(args, "iters", None) is not None:
        updates["iters"] = args.iters
    if getattr(args, "data", None):
        updates["data_dir"] = args.data
    if getattr(args, "out", None):
        updates["out_dir"] = args.out
    return replace(rc, **updates)


def _model_config(rc: RunConfig, args) -> ModelConfig:
    task = getattr(args, "task", None) or (rc.tasks[0] if args.variant == "stl" else None)
    return rc.model(args.variant, ablate=tuple(args.ablate or ()), task=task)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    rc = _run_config(args)
    try:
        cfg = rc.scene()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        manifest = D.build_dataset(cfg, rc.n_train, rc.n_val, rc.out_dir)
    except OSError as exc:
        _err(f"cannot write dataset: {exc}")
        return EXIT_FAIL
    print(manifest)
    return EXIT_OK


def _load_samples(data_dir, split: str) -> list:
    manifest = Path(data_dir) / "manifest.tsv"
    if not manifest.exists():
        raise FileNotFoundError(f"no dataset at {data_dir} (missing manifest.tsv); run gen-data first")
    samples = D.load_split(data_dir, split)
    if not samples:
        raise FileNotFoundError(f"dataset {data_dir} has no {split!r} samples")
    return samples


def cmd_train(args) -> int:
    rc = _run_config(args)
    cfg = _model_config(rc, args)
    try:
        samples = _load_samples(rc.data_dir, "train")
    except (OSError, D.FormatError) as exc:
        _err(str(exc))
        return EXIT_FAIL
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    header = (f"# variant={cfg.variant} tasks={','.join(cfg.tasks)} params={model.num_parameters()} "
              f"iters={rc.iters} seed={rc.seed}")
    log_path = out / "train.log"
    with open(log_path, "w", encoding="utf-8") as log:
        def emit(line):
            print(line)
            log.write(line + "\n")
        emit(header)
        emit("\t".join(["iter", "lr", "total"] + list(cfg.tasks)))

        def checkpoint(it, m, opt):
            save_checkpoint(out / f"checkpoint_{it:06d}.btnr", m, opt)

        val = _load_samples(rc.data_dir, "val") if rc.eval_interval else None

        def validate(it, m):
            report = evaluate(m, val)
            cells = " ".join(f"{t.name}.{t.metric}={t.value:.6f}" for t in report.tasks)
            emit(f"# eval iter={it} {cells}")
        try:
            result = train(model, samples, rc.optim(), rc.iters, batch_size=rc.batch_size, seed=rc.seed,
                           overfit_one_batch=args.overfit_one_batch, log_fn=emit,
                           checkpoint_fn=checkpoint, checkpoint_interval=rc.checkpoint_interval,
                           eval_fn=validate, eval_interval=rc.eval_interval)
        except NonFiniteLossError as exc:
            emit(f"# {exc}")
            _err(f"{exc}")
            return EXIT_FAIL
    save_checkpoint(out / "checkpoint.btnr", result.model)
    if args.overfit_one_batch:
        batch = samples[:rc.batch_size]
        report = score_predictions(cfg.task_specs, predict(result.model, np.stack([s.image for s in batch])),
                                   batch, cfg.num_classes, "train-batch")
        print(report.format_table())
        (out / "overfit_metrics.txt").write_text(report.format_kv(), encoding="utf-8")
    return EXIT_OK


def _reference_values(paths) -> dict:
    ref = {}
    for p in paths or ():
        text = Path(p).read_text(encoding="utf-8")
        ref.update(MetricsReport.parse_kv(text).values())
    return ref


def _predict_sharded(model, images: np.ndarray, workers: int) -> dict:
    if workers == 1 or len(images) < 2:
        return predict(model, images)
    shards = np.array_split(np.arange(len(images)), min(workers, len(images)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda idx: predict(model, images[idx]), shards))
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


def cmd_eval(args) -> int:
    workers = worker_count()
    if args.tables:
        return _print_tables()
    rc = _run_config(args)
    try:
        samples = _load_samples(rc.data_dir, args.split)
    except (OSError, D.FormatError) as exc:
        _err(str(exc))
        return EXIT_FAIL
    if args.predictions:
        preds = D.read_archive(args.predictions)
        specs = [standard_task(t, rc.num_classes) for t in preds]
        num_classes = rc.num_classes
        label = Path(args.predictions).stem
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --predictions")
        expect = _model_config(rc, args) if args.config else None
        try:
            model = load_checkpoint(args.checkpoint, expect=expect)
        except ValueError as exc:
            _err(str(exc))
            return EXIT_FAIL
        except OSError as exc:
            _err(f"cannot read checkpoint: {exc}")
            return EXIT_FAIL
        preds = _predict_sharded(model, np.stack([s.image for s in samples]), workers)
        specs, num_classes, label = model.task_specs, model.cfg.num_classes, model.cfg.variant
        if args.dump_predictions:
            D.write_archive(args.dump_predictions,
                            [(k, v.astype(np.int32 if k == "seg" else np.float32)) for k, v in preds.items()])
    for spec in specs:
        if len(preds[spec.name]) != len(samples):
            _err(f"{spec.name}: {len(preds[spec.name])} predictions for {len(samples)} samples")
            return EXIT_FAIL
    report = score_predictions(specs, preds, samples, num_classes, label)
    try:
        ref = _reference_values(args.stl_ref)
    except OSError as exc:
        _err(f"cannot read reference report: {exc}")
        return EXIT_FAIL
    if ref:
        report = report.with_reference(ref)
    print(report.format_table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.txt").write_text(report.format_kv(), encoding="utf-8")
    return EXIT_OK


def _print_tables() -> int:
    for table in TABLES.values():
        print(f"[{table.name}]")
        for row in table.rows:
            r = row.report(table.reference)
            gains = "  ".join(f"{t.name}={t.gain:+.2f}" for t in r.tasks)
            print(f"{row.label:<28} dMTL={r.delta_mtl:+.2f} (reported {row.delta_mtl:+.2f})  {gains}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    blocks = args.block or list(BLOCKS)

    def run():
        return run_checks(blocks, seed=args.seed or 0)
    if args.inject_fault:
        with inject_backward_fault(args.inject_fault):
            results = run()
    else:
        results = run()
    failed = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.block}\t{r.max_rel_error:.3e}\t{r.coords}\t{status}")
        if not r.passed:
            failed.append(r.block)
    if failed:
        _err(f"gradient check failed for: {', '.join(failed)}")
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bridgenet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, variant=False):
        p.add_argument("--config", metavar="PATH", help="key = value run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", metavar="DIR")
        if variant:
            p.add_argument("--variant", choices=["stl", "mtl_baseline", "bridgenet"], default="bridgenet")
            p.add_argument("--task", help="task for the stl variant (default: first configured task)")
            p.add_argument("--tfr", choices=["base", "large", "huge"])
            p.add_argument("--ablate", choices=["tpp", "bfe", "tfr"], action="append")
            p.add_argument("--data", metavar="DIR", help="dataset directory (default: data_dir key)")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    common(p, variant=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--overfit-one-batch", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a prediction dump")
    common(p, variant=True)
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--predictions", metavar="PATH", help="archive of per-task predictions to score")
    p.add_argument("--dump-predictions", metavar="PATH")
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.add_argument("--stl-ref", metavar="PATH", action="append",
                   help="metrics file with single-task reference values (repeatable)")
    p.add_argument("--tables", action="store_true", help="recompute gains for the stored benchmark tables")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--block", choices=list(BLOCKS), action="append")
    p.add_argument("--seed", type=int)
    p.add_argument("--inject-fault", choices=sorted(FAULT_TARGETS), help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, RunConfigError, ConfigError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    except (OSError, D.FormatError) as exc:
        _err(str(exc))
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
