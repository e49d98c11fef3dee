import csv
import json

import numpy as np
import pytest

from miniresnet.errors import ConfigError, ContractError, TrainingDiverged
from miniresnet.model import RESNET18_64, build_model
from miniresnet.training import (
    DESK_WIDTH_DIVISOR,
    TrainingConfig,
    compute_loss,
    desk_model,
    desk_scale,
    init_weights,
    iterate_minibatches,
    lr_at_epoch,
    predict_degrees,
    run_protocol,
    sgd_step,
    train,
    truncated_normal,
)

from conftest import toy_dataset
from oracles import loop_mse


def test_truncated_normal_statistics():
    z = truncated_normal(np.random.default_rng(0), 200_000)
    assert np.abs(z).max() <= 2.0
    assert abs(z.mean()) < 0.01
    assert z.std() == pytest.approx(0.8796, abs=0.005)


def test_init_weights_variance_scaling():
    net = init_weights(build_model(RESNET18_64), 0)
    w = net.named_parameters()["stack3.block1.conv2.weight"].data
    fan_in = 256 * 9
    assert w.std() == pytest.approx(np.sqrt(2 / fan_in), rel=0.02)
    assert np.abs(w).max() <= 2 * np.sqrt(2 / fan_in) / 0.8796 + 1e-6
    params = net.named_parameters()
    assert np.all(params["final_bn.gamma"].data == 1) and np.all(params["head.bias"].data == 0)
    again = init_weights(build_model(RESNET18_64), 0)
    for k, v in net.state().items():
        assert again.state()[k].tobytes() == v.tobytes()


def test_schedule():
    cfg = TrainingConfig()
    got = [lr_at_epoch(cfg, e) for e in (0, 29, 30, 59, 60, 80, 90, 119)]
    assert got == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001, 1e-4, 1e-5, 1e-5], rel=1e-12)


def test_desk_scale_preserves_schedule_shape():
    cfg = desk_scale(TrainingConfig(), epochs=60)
    assert cfg.epochs == 60 and cfg.lr_drop_epochs == (15, 30, 40, 45)
    assert desk_scale(TrainingConfig(), epochs=4).lr_drop_epochs == (1, 2, 3, 4)
    assert desk_model(RESNET18_64).stack_widths[0] == 64 // DESK_WIDTH_DIVISOR


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        TrainingConfig(batch_size=1)
    with pytest.raises(ConfigError):
        TrainingConfig(lr_drop_epochs=(30, 10))
    with pytest.raises(ConfigError):
        TrainingConfig(target_angle="tilt")
    with pytest.raises(ConfigError):
        TrainingConfig.from_dict({"lr": 1})
    p = tmp_path / "t.json"
    p.write_text(json.dumps(TrainingConfig(epochs=3).to_dict()))
    assert TrainingConfig.load(p).epochs == 3


def test_sgd_zero_gradient_decay_contract(tiny_model):
    net = init_weights(build_model(tiny_model, dtype=np.float64), 0)
    for p in net.parameter_list():
        p.data[...] = np.random.default_rng(1).standard_normal(p.shape)
        p.grad = np.zeros(p.shape)
    before = {k: p.data.copy() for k, p in net.named_parameters().items()}
    sgd_step(net, 0.1, 0.0002)
    for k, p in net.named_parameters().items():
        if k.endswith("weight"):
            np.testing.assert_array_equal(p.data, before[k] * (1 - 0.1 * 0.0002))
        else:
            assert p.data.tobytes() == before[k].tobytes(), k


def test_sgd_applies_gradient(tiny_model):
    net = build_model(tiny_model, dtype=np.float64)
    p = net.named_parameters()["head.bias"]
    p.grad = np.array([2.0])
    sgd_step(net, 0.5, 0.0)
    assert p.data[0] == -1.0


def test_sgd_rejects_non_finite(tiny_model):
    net = build_model(tiny_model, dtype=np.float64)
    net.named_parameters()["stem.conv.weight"].grad = np.full(net.stem.weight.shape, np.nan)
    with pytest.raises(TrainingDiverged, match="stem.conv.weight"):
        sgd_step(net, 0.1, 0.0, epoch=3, step=7)


def test_mse_loss_matches_oracle():
    rng = np.random.default_rng(0)
    p, t = rng.uniform(-1, 1, 50), rng.uniform(-1, 1, 50)
    assert float(compute_loss(p[:, None], t).data) == pytest.approx(loop_mse(p, t), abs=1e-15)
    assert float(compute_loss(np.array([[0.5]]), np.array([0.5])).data) == 0.0


def test_minibatches_drop_singletons():
    batches = list(iterate_minibatches(9, 4, np.random.default_rng(0)))
    assert [len(b) for b in batches] == [4, 4]
    batches = list(iterate_minibatches(10, 4, np.random.default_rng(0)))
    assert sorted(np.concatenate(batches)) == list(range(10))


def test_zero_epochs_is_a_no_op(tiny_model, toy):
    net = init_weights(build_model(tiny_model), 0)
    before = net.state()
    run = train(net, toy, TrainingConfig(epochs=0, batch_size=4))
    assert run.losses == [] and net.mode == "infer"
    for k, v in net.state().items():
        assert v.tobytes() == before[k].tobytes()


def test_training_overfits_repeated_sample(tiny_model):
    one = toy_dataset(1, seed=4)
    ds = one.subset(np.zeros(32, dtype=int))
    net = init_weights(build_model(tiny_model), 0)
    run = train(net, ds, TrainingConfig(epochs=30, batch_size=8, lr_drop_epochs=(20,)))
    assert run.losses[-1] < 0.01 * run.losses[0] or run.losses[-1] < 1e-4
    assert all(np.isfinite(run.losses))


def test_training_is_deterministic(tiny_model, toy, tmp_path):
    cfg = TrainingConfig(epochs=2, batch_size=4, checkpoint_every=1)
    a = train(init_weights(build_model(tiny_model), 0), toy, cfg, checkpoint_dir=tmp_path / "ck")
    b = train(init_weights(build_model(tiny_model), 0), toy, cfg)
    assert a.losses == b.losses
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == [
        "epoch0001.bin", "epoch0001.json", "epoch0002.bin", "epoch0002.json",
    ]
    a.write_loss_csv(tmp_path / "loss.csv")
    rows = list(csv.DictReader((tmp_path / "loss.csv").open()))
    assert [float(r["mean_loss"]) for r in rows] == a.losses


def test_training_contracts(tiny_model, toy):
    net = build_model(tiny_model)
    with pytest.raises(ContractError):
        train(net, toy.subset([0]), TrainingConfig(batch_size=2))
    with pytest.raises(ConfigError):
        train(build_model(tiny_model.scaled(1, input_size=32)), toy, TrainingConfig(batch_size=2))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_history(tiny_model, toy):
    net = init_weights(build_model(tiny_model), 0)
    with pytest.raises(TrainingDiverged) as info:
        train(net, toy, TrainingConfig(epochs=3, batch_size=4, initial_lr=1e38))
    assert info.value.epoch is not None
    assert net.mode == "infer"


def test_cv5_predicts_each_sample_once(tiny_model):
    ds = toy_dataset(15)
    res = run_protocol("cv5", [ds], tiny_model, TrainingConfig(epochs=1, batch_size=4))
    idx = np.concatenate([p.indices for p in res.predictions])
    assert sorted(idx.tolist()) == list(range(15))
    assert [p.run_id for p in res.predictions] == [f"fold{i}" for i in range(5)]
    for p in res.predictions:
        np.testing.assert_array_equal(p.true, ds.angle_degrees("yaw")[p.indices])


def test_train_test_x5_runs_are_seeded(tiny_model):
    tr, te = toy_dataset(10, seed=1), toy_dataset(6, seed=2)
    cfg = TrainingConfig(epochs=1, batch_size=4, seed=3)
    res = run_protocol("train_test_x5", [tr, te], tiny_model, cfg)
    assert len(res.runs) == 5
    for p in res.predictions:
        np.testing.assert_array_equal(p.true, te.angle_degrees("yaw"))
    assert len({tuple(r.losses) for r in res.runs}) == 5
    again = run_protocol("train_test_x5", [tr, te], tiny_model, cfg, jobs=2)
    for a, b in zip(res.predictions, again.predictions):
        np.testing.assert_array_equal(a.predicted, b.predicted)


def test_protocol_errors(tiny_model, toy):
    with pytest.raises(ConfigError):
        run_protocol("loo", [toy], tiny_model, TrainingConfig())
    with pytest.raises(ConfigError):
        run_protocol("cv5", [toy, toy], tiny_model, TrainingConfig())
    with pytest.raises(ConfigError):
        run_protocol("train_test_x5", [toy], tiny_model, TrainingConfig())


def test_predict_degrees_range(tiny_model, toy):
    net = init_weights(build_model(tiny_model), 0)
    d = predict_degrees(net, toy)
    assert d.shape == (len(toy),) and np.abs(d).max() < 100
