"""Acceptance gate: one test per criterion, each printing a PASS/FAIL verdict line.

Criterion 7 trains five toy models (about seven minutes on one CPU core).
"""

import statistics
import time
from dataclasses import replace

import numpy as np
import pytest

from bridgenet import tensor as T
from bridgenet.bfe import BfeConfig, BfeModule, bfe_forward
from bridgenet.data import (
    FormatError,
    TruncatedError,
    VAL_SEED_OFFSET,
    decode_tensor,
    encode_tensor,
    generate_scene,
    read_archive,
    write_archive,
)
from bridgenet.gradcheck import BLOCKS, TOLERANCE, run_checks
from bridgenet.metrics import mean_angle_error, max_f, miou, ods_f, rmse
from bridgenet.model import BridgeNet, ModelConfig, baseline_forward, bridgenet_forward
from bridgenet.nn import FfnBlock, HdcBlock, ffn_forward, hdc_forward
from bridgenet.reference_tables import NYUD_COMPONENTS, NYUD_TASK_SETS, recompute
from bridgenet.tensor import Rng, Tensor
from bridgenet.tfr import TfrLayer, tfr_layer_forward
from bridgenet.tpp import TppConfig, TppModule, shared_pattern, task_attention, tpp_forward
from bridgenet.train import RunConfig, evaluate, predict, score_predictions, train
from conftest import record
from oracles import maxf_oracle, miou_oracle, odsf_oracle


# ---------------------------------------------------------------------------
# 1. gain arithmetic against the stored benchmark tables


def test_criterion_1_delta_reproduction():
    t0 = time.perf_counter()
    rows = recompute(NYUD_COMPONENTS)
    pair = NYUD_TASK_SETS.rows[0]
    pair_report = pair.report(NYUD_TASK_SETS.reference)
    elapsed = time.perf_counter() - t0
    got = [round(d, 2) for _, d, _ in rows]
    gains = {t.name: t.gain for t in pair_report.tasks}
    ok = (
        all(abs(d - exp) <= 0.01 for (_, d, _), exp in zip(rows, (-1.17, 0.96, 1.29, 2.45)))
        and abs(gains["seg"] - 3.49) <= 0.01
        and abs(gains["depth"] - 7.92) <= 0.01
        and abs(pair_report.delta_mtl - 5.70) <= 0.01
        and elapsed < 1.0
    )
    detail = (f"components {got}, seg+depth gains {gains['seg']:+.2f}/{gains['depth']:+.2f} "
              f"dMTL {pair_report.delta_mtl:+.2f}, {elapsed * 1000:.1f} ms")
    assert record("1", "gain formula reproduces table cells", ok, detail)


# ---------------------------------------------------------------------------
# 2. gradient oracle


def test_criterion_2_gradcheck():
    t0 = time.perf_counter()
    results = run_checks(list(BLOCKS), seed=0)
    elapsed = time.perf_counter() - t0
    names = {r.block for r in results}
    ok = names == {"tpp", "bfe", "tfr", "hdc", "ffn", "model"} and all(r.passed for r in results) and elapsed < 300
    detail = ", ".join(f"{r.block} {r.max_rel_error:.1e}" for r in results) + f"; tol {TOLERANCE:g}, {elapsed:.0f} s"
    assert record("2", "finite-difference gradient check", ok, detail)


# ---------------------------------------------------------------------------
# 3. shapes, normalisation, zero-init identities


def _attention_shape_cases(n=25):
    rng = np.random.default_rng(2024)
    failures = 0
    for _ in range(n):
        d, l = (int(v) for v in rng.choice([1, 2, 4], size=2))
        t = int(rng.integers(1, 5))
        hs, ws = d * int(rng.integers(1, 4)), d * int(rng.integers(1, 4))
        hp, wp = l * int(rng.integers(1, 4)), l * int(rng.integers(1, 4))
        m = BfeModule(BfeConfig(4, 4, 4, l, d, heads=2), Rng(int(rng.integers(1 << 30))))
        s = Tensor(rng.normal(size=(1, 4, hs, ws)))
        ps = [Tensor(rng.normal(size=(1, 4, hp, wp))) for _ in range(t)]
        _, attn = bfe_forward(m, s, ps, return_attention=True)
        expected = (hs * ws // (d * d), t * hp * wp // (l * l))
        failures += attn.shape[-2:] != expected
        failures += np.abs(attn.data.sum(-1) - 1).max() > 1e-6
    return failures


def _softmax_rows_ok():
    rng = np.random.default_rng(7)
    x = T.softmax_lastdim(Tensor(rng.normal(scale=10, size=(3, 5, 17))))
    tpp = TppModule(TppConfig(3, 8, 8, 2), Rng(1))
    feats = [Tensor(rng.normal(size=(1, 8, 4, 4))) for _ in range(3)]
    pattern = shared_pattern(tpp, [task_attention(tpp, f, j)[0] for j, f in enumerate(feats)])
    return max(np.abs(x.data.sum(-1) - 1).max(), np.abs(pattern.data.sum(-1) - 1).max()) <= 1e-6


def _zero_init_identities():
    rng = np.random.default_rng(3)
    x_tok = rng.normal(size=(2, 9, 8))
    x_map = rng.normal(size=(1, 8, 8, 8))
    checks = []
    ffn = FfnBlock(8, Rng(0))
    ffn.fc2.zero_()
    checks.append(np.array_equal(ffn_forward(ffn, Tensor(x_tok)).data, x_tok))
    hdc = HdcBlock(8, 8, Rng(0))
    for c in hdc.convs:
        c.zero_()
    checks.append(np.array_equal(hdc_forward(hdc, Tensor(x_map)).data, x_map))
    tpp = TppModule(TppConfig(2, 8, 8, 2), Rng(0)).zero_outputs_()
    outs = tpp_forward(tpp, [Tensor(x_map), Tensor(2 * x_map)])
    checks.append(np.array_equal(outs[0].data, x_map) and np.array_equal(outs[1].data, 2 * x_map))
    bfe = BfeModule(BfeConfig(8, 8, 8, 2, 2, heads=2), Rng(0)).zero_outputs_()
    checks.append(np.array_equal(bfe_forward(bfe, Tensor(x_map), [Tensor(x_map)] * 2).data, x_map))
    layer = TfrLayer(8, 8, Rng(0))
    layer.zero_()
    checks.append(np.array_equal(tfr_layer_forward(layer, Tensor(2 * x_map), Tensor(x_map)).data, x_map))
    return checks


def test_criterion_3_shapes_and_normalisation():
    with T.default_dtype(np.float64):
        shape_failures = _attention_shape_cases(25)
        rows_ok = _softmax_rows_ok()
        identities = _zero_init_identities()
    ok = shape_failures == 0 and rows_ok and all(identities)
    detail = (f"25 attention-shape configs, {shape_failures} failures; softmax rows {'ok' if rows_ok else 'off'}; "
              f"zero-init identities {sum(identities)}/{len(identities)}")
    assert record("3", "shape formula, softmax rows, zero-init identities", ok, detail)


# ---------------------------------------------------------------------------
# 4. linear interaction cost


def test_criterion_4_linear_interaction_parameters():
    base = ModelConfig(image_size=32, channels=8, kv_downsample=(2, 2, 1))
    tasks = ("seg", "depth", "normals", "edges")
    counts = [BridgeNet(replace(base, tasks=tasks[:t])).interaction_parameters() for t in range(1, 5)]
    totals = [sum(c.values()) for c in counts]
    second = np.diff(totals, 2).tolist()
    bfe = [c["bfe"] for c in counts]
    ok = all(v == 0 for v in second) and len(set(bfe)) == 1
    detail = f"TPP+BFE+TFR params {totals}, second differences {second}, BFE {bfe}"
    assert record("4", "interaction parameters affine in task count", ok, detail)


# ---------------------------------------------------------------------------
# 5. metric oracles


def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(55)
    mismatches = {"miou": 0, "maxF": 0, "odsF": 0}
    for _ in range(200):
        k = int(rng.integers(2, 6))
        gt = rng.integers(0, k, (8, 8))
        gt[rng.random((8, 8)) < 0.1] = 255
        pred = rng.integers(0, k, (8, 8))
        mismatches["miou"] += int(miou(pred, gt, k) != miou_oracle(pred, gt, k))
        prob = rng.random((8, 8))
        edges = (rng.random((8, 8)) < rng.uniform(0.05, 0.5)).astype(int)
        mismatches["maxF"] += int(max_f([prob], [edges]) != maxf_oracle([prob], [edges]))
        mismatches["odsF"] += int(ods_f([prob], [edges]) != odsf_oracle([prob], [edges]))
    a = np.zeros((3, 1, 1))
    a[0] = 1
    b = np.zeros((3, 1, 1))
    b[:2] = 1 / np.sqrt(2)
    analytic = [
        abs(rmse([1.0, 3.0], [2.0, 1.0]) - np.sqrt(2.5)) <= 1e-6,
        abs(rmse(np.full(9, 2.25), np.zeros(9)) - 2.25) <= 1e-6,
        abs(mean_angle_error(a, b) - 45.0) <= 1e-6,
        abs(mean_angle_error(a, np.roll(a, 1, axis=0)) - 90.0) <= 1e-6,
        mean_angle_error(a, a) <= 1e-6,
    ]
    ok = not any(mismatches.values()) and all(analytic)
    detail = f"200 instances, mismatches {mismatches}; analytic rmse/mErr {sum(analytic)}/{len(analytic)}"
    assert record("5", "metrics equal brute-force oracles", ok, detail)


# ---------------------------------------------------------------------------
# 6. ablation equivalence


def test_criterion_6_ablation_equivalence():
    cfg = ModelConfig(image_size=32, channels=8, kv_downsample=(2, 2, 1))
    full = BridgeNet(cfg)
    ablated = BridgeNet(replace(cfg, use_tpp=False, use_bfe=False, use_tfr=False))
    shared = full.state_dict()
    ablated.load_state_dict({k: v for k, v in shared.items() if k in ablated.state_dict()})
    rng = np.random.default_rng(66)
    equal = 0
    for _ in range(10):
        x = Tensor(rng.normal(size=(2, 3, 32, 32)).astype(np.float32))
        a, b = bridgenet_forward(ablated, x), baseline_forward(full, x)
        same = all(a["final"][t].data.tobytes() == b["final"][t].data.tobytes() for t in cfg.tasks)
        same &= all(p.data.tobytes() == q.data.tobytes()
                    for t in cfg.tasks for p, q in zip(a["initial"][t], b["initial"][t]))
        equal += same
    assert record("6", "all-ablated network equals the baseline bitwise", equal == 10, f"{equal}/10 inputs bitwise equal")


# ---------------------------------------------------------------------------
# 7. toy training sanity


class _Reached(Exception):
    pass


def _overfit(rc: RunConfig):
    scene = rc.scene()
    batch = [generate_scene(scene, i) for i in range(rc.batch_size)]
    model = BridgeNet(rc.model())
    state = {}
    images = np.stack([s.image for s in batch])

    def check(it, m):
        rep = score_predictions(m.task_specs, predict(m, images), batch, rc.num_classes).values()
        state.update(iters=it, **rep)
        if rep["seg"] >= 0.99 and rep["depth"] <= 0.02:
            raise _Reached

    try:
        train(model, batch, rc.optim(), rc.iters, batch_size=rc.batch_size, seed=rc.seed,
              overfit_one_batch=True, eval_fn=check, eval_interval=100)
    except _Reached:
        pass
    return state


def _delta_run(rc: RunConfig):
    scene = rc.scene()
    train_set = [generate_scene(scene, i) for i in range(rc.n_train)]
    val_set = [generate_scene(scene, VAL_SEED_OFFSET + i) for i in range(rc.n_val)]

    def fit(cfg):
        model = BridgeNet(cfg)
        train(model, train_set, rc.optim(), rc.iters, batch_size=rc.batch_size, seed=rc.seed)
        return evaluate(model, val_set, cfg.variant)

    reference = {}
    for task in rc.tasks:
        reference.update(fit(rc.model("stl", task=task)).values())
    base = fit(rc.model("mtl_baseline")).with_reference(reference)
    ours = fit(rc.model("bridgenet")).with_reference(reference)
    return base.delta_mtl, ours.delta_mtl


@pytest.mark.slow
def test_criterion_7_training_sanity():
    t0 = time.perf_counter()
    rc = RunConfig(seed=0)
    over = _overfit(rc)
    overfit_ok = over.get("seg", 0) >= 0.99 and over.get("depth", 1) <= 0.02
    margins, runs = [], []
    for seed in (0, 1, 2):
        base, ours = _delta_run(replace(rc, seed=seed))
        margins.append(ours - base)
        runs.append(f"seed {seed}: baseline {base:+.2f} bridgenet {ours:+.2f}")
        if seed == 0 and margins[0] > 0:
            break
    margin = margins[0] if len(margins) == 1 else statistics.median(margins)
    elapsed = time.perf_counter() - t0
    ok = overfit_ok and margin > 0 and elapsed < 1800
    detail = (f"(a) overfit mIoU {over.get('seg', float('nan')):.4f} rmse {over.get('depth', float('nan')):.4f} "
              f"after {over.get('iters')} iters; (b) dMTL {'; '.join(runs)}; margin {margin:+.2f}; {elapsed / 60:.1f} min")
    assert record("7", "toy overfit and BridgeNet above baseline", ok, detail)


# ---------------------------------------------------------------------------
# 8. file format


def test_criterion_8_file_round_trips(tmp_path):
    rng = np.random.default_rng(88)
    identical = 0
    for i in range(1000):
        named = []
        for j in range(int(rng.integers(1, 4))):
            shape = tuple(int(v) for v in rng.integers(0, 6, size=int(rng.integers(0, 4))))
            if rng.random() < 0.5:
                arr = rng.normal(scale=1e3, size=shape).astype(np.float32)
            else:
                arr = rng.integers(-2**31, 2**31, size=shape, dtype=np.int64).astype(np.int32)
            named.append((f"tensor_{j}", arr))
        path = tmp_path / f"{i}.btnr"
        write_archive(path, named)
        back = read_archive(path)
        identical += list(back) == [n for n, _ in named] and all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for (_, a), b in zip(named, back.values()))
    good = encode_tensor(np.arange(12, dtype=np.float32).reshape(3, 4))
    errors = []
    for bad, kind in ((b"BTNX" + good[4:], FormatError), (good[:-3], TruncatedError), (good[:5], TruncatedError)):
        try:
            decode_tensor(bad)
            errors.append(False)
        except kind:
            errors.append(True)
    ok = identical == 1000 and all(errors)
    detail = f"{identical}/1000 archives bitwise identical; corruption errors {sum(errors)}/{len(errors)}"
    assert record("8", "tensor archive round trips and corruption errors", ok, detail)
