"""End-to-end acceptance checks, one test per criterion.

Each test also prints a one-line PASS/FAIL verdict; the conftest hook
collects them into an "acceptance criteria" section of the pytest summary.
"""

import time

import numpy as np
import pytest

from miniresnet.benchmark import benchmark_suite
from miniresnet.data import (
    DESK_RANGES,
    FilterPolicy,
    PoseSample,
    denormalize_label,
    load_manifest,
    make_synthetic_dataset,
    normalize_label,
    prepare_dataset,
    rejection_reason,
)
from miniresnet.evaluation import (
    PredictionSet,
    abs_error_std,
    bin_category,
    category_accuracy,
    confusion_heatmap,
    mae,
    tolerant_accuracy,
)
from miniresnet.gradcheck import check_network
from miniresnet.model import CANONICAL, RESNET18_64, ModelConfig, build_model, count_parameters
from miniresnet.tensor import Tensor
from miniresnet.training import (
    TrainingConfig,
    desk_model,
    desk_scale,
    init_weights,
    lr_at_epoch,
    predict_degrees,
    run_protocol,
    sgd_step,
    train,
)

from conftest import toy_dataset
from oracles import loop_category_accuracy, loop_heatmap, loop_mae, loop_std, loop_tolerant_accuracy


def verdict(n, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    return ok


def test_criterion_1_parameter_counts():
    t0 = time.perf_counter()
    expected = {"resnet34-112": 21.27e6, "resnet18-112": 11.17e6, "resnet18-64": 4.25e6}
    counts = {name: count_parameters(build_model(CANONICAL[name])) for name in expected}
    elapsed = time.perf_counter() - t0
    rel = {k: abs(counts[k] - v) / v for k, v in expected.items()}
    ok = all(r < 0.05 for r in rel.values()) and elapsed < 1.0
    assert verdict(1, ok, f"counts {counts}, max rel dev {max(rel.values()):.4%}, {elapsed:.2f}s")


def test_criterion_2_layer_audit():
    plans = {"resnet34-112": ((3, 4, 6, 3), 34), "resnet18-112": ((2, 2, 2, 2), 18), "resnet18-64": ((2, 3, 3, 0), 18)}
    got = {}
    for name, (plan, _) in plans.items():
        net = build_model(CANONICAL[name])
        got[name] = (CANONICAL[name].stacks, net.weighted_layer_count())
        blocks = [len(s) for s in net.stacks] + [0] * (len(plan) - len(net.stacks))
        assert tuple(blocks) == plan
    ok = got == plans
    assert verdict(2, ok, f"{got}")


def test_criterion_3_gradient_soundness():
    t0 = time.perf_counter()
    cfg = ModelConfig(name="mini", input_size=16, stacks=(1, 1, 1, 1), stack_widths=(8, 16, 32, 64))
    net = init_weights(build_model(cfg, dtype=np.float64), 0)
    x = np.random.default_rng(0).uniform(-1, 1, (4, 1, 16, 16))
    worst = {}
    n = {}
    for mode in ("train", "infer"):
        if mode == "infer":
            # Give the running statistics non-trivial values first.
            for _ in range(3):
                net.forward(Tensor(x), "train")
        net.set_mode(mode)
        worst[mode], n[mode] = check_network(net, x, epsilon=1e-5, samples=200, seed=0, return_count=True)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and min(n.values()) >= 200 and elapsed < 120
    assert verdict(3, ok, f"max rel err {worst}, sampled {n}, {elapsed:.1f}s")


def test_criterion_4_identity_pass_through():
    net = init_weights(build_model(RESNET18_64.scaled(8, input_size=32), dtype=np.float64), 0)
    rng = np.random.default_rng(1)
    worst, checked = 0.0, 0
    for name, block in net.blocks():
        block.bn1.gamma.data[...] = 1
        block.bn1.beta.data[...] = 0
        block.bn2.gamma.data[...] = 1
        block.bn2.beta.data[...] = 0
        for conv in (block.conv1, block.conv2):
            conv.weight.data[...] = 0
        if not block.identity:
            continue
        size = dict(net.shapes)[name][1]
        x = Tensor(rng.standard_normal((3, block.in_ch, size, size)))
        for mode in ("train", "infer"):
            out = block.forward(x, mode)
            worst = max(worst, float(np.abs(out.data - x.data).max()))
        checked += 1
    ok = checked > 0 and worst <= 1e-6
    assert verdict(4, ok, f"{checked} identity blocks, max |out - x| = {worst:g}")


def test_criterion_5_optimizer_contract():
    net = init_weights(build_model(RESNET18_64.scaled(8, input_size=32), dtype=np.float64), 0)
    rng = np.random.default_rng(2)
    for p in net.parameter_list():
        p.data[...] = rng.standard_normal(p.shape)
        p.grad = np.zeros(p.shape)
    before = {k: p.data.copy() for k, p in net.named_parameters().items()}
    lr, wd = 0.1, 0.0002
    sgd_step(net, lr, wd)
    shrunk = kept = 0
    ok = True
    for k, p in net.named_parameters().items():
        if k.endswith(".weight"):
            ok &= np.array_equal(p.data, before[k] * (1 - lr * wd))
            shrunk += 1
        else:
            ok &= p.data.tobytes() == before[k].tobytes()
            kept += 1
    assert verdict(5, bool(ok), f"{shrunk} weight tensors scaled by 1 - lr*wd, {kept} bn/bias tensors unchanged")


def test_criterion_6_schedule():
    cfg = TrainingConfig()
    got = [lr_at_epoch(cfg, e) for e in (0, 30, 60, 80, 90)]
    want = [0.1, 0.01, 0.001, 1e-4, 1e-5]
    ok = np.allclose(got, want, rtol=1e-12, atol=0) and lr_at_epoch(cfg, 29) == 0.1
    assert verdict(6, ok, f"lr at epochs 0/30/60/80/90 = {got}")


@pytest.mark.slow
def test_criterion_7_desk_convergence(tmp_path):
    t0 = time.perf_counter()
    manifest = make_synthetic_dataset(200, 7, 64, tmp_path / "syn", ranges=DESK_RANGES)
    ds = prepare_dataset(load_manifest(manifest), 64)
    net = init_weights(build_model(desk_model(RESNET18_64)), 0)
    cfg = desk_scale(TrainingConfig(seed=0), epochs=60)
    train(net, ds, cfg)
    err = float(np.mean(np.abs(predict_degrees(net, ds) - ds.angle_degrees("yaw"))))
    elapsed = time.perf_counter() - t0
    ok = len(ds) == 200 and err < 2.0 and elapsed < 900
    assert verdict(7, ok, f"train MAE {err:.3f} deg after {cfg.epochs} epochs, {elapsed:.0f}s")


def _random_set(rng):
    n = int(rng.integers(2, 80))
    true = rng.uniform(-100, 100, n)
    pred = np.clip(true + rng.normal(0, rng.uniform(1, 40), n), -100, 100)
    edge = rng.random(n) < 0.2
    pred[edge] = 7.5 + 15 * rng.integers(-7, 6, int(edge.sum()))
    return PredictionSet(pred, true)


def test_criterion_8_metric_oracles():
    rng = np.random.default_rng(8)
    worst = 0.0
    exact = True
    for _ in range(1000):
        s = _random_set(rng)
        p, t = s.predicted.tolist(), s.true.tolist()
        worst = max(worst, abs(mae(s) - loop_mae(p, t)), abs(abs_error_std(s) - loop_std(p, t)))
        worst = max(worst, abs(category_accuracy(s) - loop_category_accuracy(p, t)))
        worst = max(worst, abs(tolerant_accuracy(s) - loop_tolerant_accuracy(p, t)))
        heat = confusion_heatmap(s, (-7, 7)).matrix
        worst = max(worst, float(np.abs(heat - loop_heatmap(p, t, -7, 7)).max()))
    exact &= bin_category(7.5) == 0 and bin_category(-7.5) == -1
    exact &= bin_category(7.500001) == 1 and bin_category(-7.499999) == 0
    ok = worst < 1e-9 and exact
    assert verdict(8, ok, f"max deviation from loop oracles {worst:g} over 1000 sets; bins 7.5->0, -7.5->-1")


def test_criterion_9_protocol_coverage():
    model = ModelConfig(name="tiny", input_size=16, stacks=(1, 1), stack_widths=(4, 8))
    cfg = TrainingConfig(epochs=1, batch_size=4, seed=11)
    ds = toy_dataset(20, seed=3)
    cv = run_protocol("cv5", [ds], model, cfg)
    hits = np.bincount(np.concatenate([p.indices for p in cv.predictions]), minlength=len(ds))
    cv_ok = len(cv.predictions) == 5 and np.all(hits == 1)
    tr, te = toy_dataset(12, seed=4), toy_dataset(8, seed=5)
    tt = run_protocol("train_test_x5", [tr, te], model, cfg)
    same_test = all(np.array_equal(p.true, te.angle_degrees("yaw")) and np.array_equal(p.indices, np.arange(8))
                    for p in tt.predictions)
    seeds = [r.config.seed for r in tt.runs]
    tt_ok = len(tt.runs) == 5 and same_test and len(set(seeds)) == 5
    again = run_protocol("train_test_x5", [tr, te], model, cfg)
    repro = all(np.array_equal(a.predicted, b.predicted) for a, b in zip(tt.predictions, again.predictions))
    ok = cv_ok and tt_ok and repro
    assert verdict(9, ok, f"cv5 coverage counts {set(hits.tolist())}; train_test_x5 seeds {seeds}, reproducible {repro}")


@pytest.mark.slow
def test_criterion_10_benchmark_ordering():
    t0 = time.perf_counter()
    results = benchmark_suite(["resnet18-64", "resnet18-112", "resnet34-112"], warmup=3, iters=15, threads=1)
    fps = {r.model: r.fps for r in results}
    elapsed = time.perf_counter() - t0
    ok = fps["resnet18-64"] > fps["resnet18-112"] > fps["resnet34-112"] and elapsed < 300
    shown = ", ".join(f"{k} {v:.1f} fps" for k, v in fps.items())
    assert verdict(10, ok, f"{shown} ({results[0].hardware}), {elapsed:.0f}s")


def test_criterion_11_pipeline_bounds(tmp_path):
    manifest = make_synthetic_dataset(24, 5, 32, tmp_path / "syn", ranges={"yaw": 100, "pitch": 45, "roll": 25},
                                      noise_std=0.2)
    ds = prepare_dataset(load_manifest(manifest), 32)
    labels = normalize_label(ds.degrees)
    bounds = ds.images.min() >= -1 and ds.images.max() <= 1 and labels.min() >= -1 and labels.max() <= 1
    round_trip = all(denormalize_label(normalize_label(d)) == d for d in (-45.0, 100.0, 0.0))
    policy = FilterPolicy()

    def s(yaw, side, source):
        return PoseSample("x.png", 0, 0, side, side, yaw, 0.0, 0.0, source)

    yaw_rule = rejection_reason(s(120, 200, "AFLW"), policy, 64) == "yaw_range"
    yaw_rule &= rejection_reason(s(99, 200, "AFLW"), policy, 64) is None
    afw_rule = rejection_reason(s(0, 120, "AFW"), policy, 64) == "afw_face_size"
    afw_rule &= rejection_reason(s(0, 120, "AFLW"), policy, 64) is None
    afw_rule &= rejection_reason(s(0, 151, "AFW"), policy, 64) is None
    ok = bounds and round_trip and yaw_rule and afw_rule
    assert verdict(11, ok, f"pixels/labels in [-1,1] {bounds}; yaw 120 dropped, 99 kept {yaw_rule}; "
                           f"AFW-only 150px rule {afw_rule}")
