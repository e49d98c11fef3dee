import json

import numpy as np
import pytest

from miniresnet.errors import ConfigError, FormatError, ShapeError
from miniresnet.model import (
    CANONICAL,
    RESNET18_64,
    RESNET18_112,
    RESNET34_112,
    ModelConfig,
    StemConfig,
    build_model,
    count_parameters,
    describe_network,
    load_weights,
    resolve_config,
    save_weights,
)
from miniresnet.serialize import read_tensors, write_tensors
from miniresnet.tensor import Tensor
from miniresnet.training import init_weights

TINY = ModelConfig(name="tiny", input_size=16, stacks=(1, 1, 1, 1), stack_widths=(8, 16, 32, 64))


def expected_count(cfg):
    """Closed-form parameter count for the layer graph."""
    c0 = cfg.stem_channels
    k = cfg.stem.kernel
    total = k * k * cfg.input_channels * c0
    cin = c0
    for si, (n, w) in enumerate(zip(cfg.effective_stacks, cfg.effective_widths)):
        for bi in range(n):
            stride = 2 if si > 0 and bi == 0 else 1
            total += 2 * cin + 9 * cin * w + 2 * w + 9 * w * w
            if cin != w or stride != 1:
                total += cin * w
            cin = w
    return total + 2 * cin + cin * cfg.head.outputs + cfg.head.outputs


@pytest.mark.parametrize("cfg", [RESNET34_112, RESNET18_112, RESNET18_64, TINY])
def test_parameter_count_matches_closed_form(cfg):
    assert count_parameters(build_model(cfg)) == expected_count(cfg)


@pytest.mark.parametrize("cfg,layers", [(RESNET34_112, 34), (RESNET18_112, 18), (RESNET18_64, 18)])
def test_weighted_layers(cfg, layers):
    net = build_model(cfg)
    assert net.weighted_layer_count() == layers
    assert [len(s) for s in net.stacks] == list(cfg.effective_stacks)


def test_zero_stack_is_omitted():
    net = build_model(RESNET18_64)
    assert len(net.stacks) == 3
    assert net.head.weight.shape == (1, 256)
    assert net.shapes[-2][1] == (256, 8, 8)


def test_shape_trail_112():
    net = build_model(RESNET18_112)
    trail = dict(net.shapes)
    assert trail["stem.conv"] == (64, 112, 112)
    assert trail["stem.pool"] == (64, 56, 56)
    assert trail["stack4.block1"] == (512, 7, 7)


def test_projection_shortcut_placement():
    net = build_model(RESNET18_112)
    blocks = dict(net.blocks())
    assert blocks["stack1.block0"].identity and blocks["stack1.block1"].identity
    assert not blocks["stack2.block0"].identity
    assert blocks["stack2.block0"].shortcut.weight.shape == (128, 64, 1, 1)
    assert blocks["stack2.block0"].shortcut.stride == 2


def test_forward_shape_and_range():
    net = init_weights(build_model(TINY, dtype=np.float64), 0)
    out = net.forward(np.random.default_rng(0).uniform(-1, 1, (3, 1, 16, 16)), "train")
    assert out.shape == (3, 1)
    assert np.all(np.abs(out.data) < 1)
    assert net.predict(np.zeros((5, 1, 16, 16))).shape == (5,)


def test_forward_rejects_wrong_size():
    net = build_model(TINY)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 1, 17, 17)))


def test_identity_block_is_pass_through_when_residual_zeroed():
    net = init_weights(build_model(TINY, dtype=np.float64), 1)
    x = Tensor(np.random.default_rng(2).standard_normal((2, 8, 8, 8)))
    block = dict(net.blocks())["stack1.block0"]
    block.conv1.weight.data[...] = 0
    block.conv2.weight.data[...] = 0
    out = block.forward(x, "train")
    np.testing.assert_array_equal(out.data, x.data)
    np.testing.assert_array_equal(block.residual(x, "infer").data, 0)


def test_underflowing_input_is_a_config_error():
    with pytest.raises(ConfigError, match="underflow|pool"):
        build_model(ModelConfig(input_size=2, stacks=(1, 1, 1, 1), stack_widths=(4, 4, 4, 4)))
    with pytest.raises(ConfigError):
        build_model(ModelConfig(input_size=4, stacks=(1, 1, 1, 1), stack_widths=(4, 4, 4, 4)))


@pytest.mark.parametrize(
    "kw",
    [
        {"stacks": (1, 1), "stack_widths": (4,)},
        {"stacks": (0, 1), "stack_widths": (4, 4)},
        {"stacks": (1, 0, 1), "stack_widths": (4, 4, 4)},
        {"stack_widths": (64, 0, 256, 512)},
        {"input_size": 0},
        {"bn_momentum": 1.0},
    ],
)
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_config_json_round_trip(tmp_path):
    cfg = RESNET18_64.scaled(4, name="r")
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert ModelConfig.load(p) == cfg
    assert resolve_config(p) == cfg
    assert resolve_config("ResNet18-64") is RESNET18_64
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        resolve_config(tmp_path / "missing.json")


def test_scaled_widths():
    cfg = RESNET34_112.scaled(8)
    assert cfg.stack_widths == (8, 16, 32, 64) and cfg.stacks == RESNET34_112.stacks


def test_stem_override():
    cfg = ModelConfig(input_size=16, stacks=(1,), stack_widths=(4,), stem=StemConfig(kernel=3, pool=False, channels=2))
    net = build_model(cfg)
    assert net.stem.weight.shape == (2, 1, 3, 3)
    assert dict(net.shapes)["stack1.block0"] == (4, 16, 16)


def test_describe_lists_every_layer():
    net = build_model(RESNET18_64)
    text = describe_network(net)
    assert "weighted layers: 18" in text
    assert f"parameters: {count_parameters(net):,}" in text
    for name, _ in net.layers():
        assert name in text


def test_weights_round_trip(tmp_path):
    net = init_weights(build_model(TINY), 5)
    net.forward(np.random.default_rng(0).standard_normal((4, 1, 16, 16)).astype(np.float32), "train")
    save_weights(net, tmp_path / "w.bin")
    back = load_weights(tmp_path / "w.bin")
    assert back.mode == "infer" and back.config == TINY
    for k, v in net.state().items():
        assert back.state()[k].tobytes() == v.tobytes()
    x = np.random.default_rng(1).standard_normal((2, 1, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(back.predict(x), net.predict(x))


def test_load_weights_mismatch_names_tensor(tmp_path):
    save_weights(init_weights(build_model(TINY), 0), tmp_path / "w.bin")
    other = TINY.scaled(2)
    with pytest.raises(FormatError, match="stem.conv.weight"):
        load_weights(tmp_path / "w.bin", other)
    tensors, side = read_tensors(tmp_path / "w.bin")
    del tensors["head.bias"]
    write_tensors(tmp_path / "x.bin", tensors, meta=side["meta"])
    with pytest.raises(FormatError, match="head.bias"):
        load_weights(tmp_path / "x.bin")


def test_canonical_names():
    assert set(CANONICAL) == {"resnet34-112", "resnet18-112", "resnet18-64"}
