import json

import numpy as np
import pytest

from st3d import arch, ops
from st3d.arch import (BlockVariant, count_params, freeze_stages, make_block,
                       make_network, named_spec, replace_classifier, stage_param_counts,
                       summarize_shapes)
from st3d.errors import ConfigError, ShapeError
from st3d.layers import Conv3d
from st3d.tensor import Tensor, backward

import oracles

ALL = sorted(oracles.STAGE_TABLE)


def meta_net(model, depth, **kw):
    return make_network(named_spec(model, depth, **kw), seed=None)


def named_modules(module, prefix=""):
    yield prefix.rstrip("."), module
    for name, child in module.children():
        yield from named_modules(child, f"{prefix}{name}.")


# ----------------------------------------------------------- table and specs

@pytest.mark.parametrize("key", ALL)
def test_stage_table_conformance(key):
    _, widths, blocks = oracles.STAGE_TABLE[key]
    spec = named_spec(*key)
    assert spec.stage_widths == widths
    assert spec.stage_blocks == blocks


def test_printed_resnext_row_contradicts_its_depth():
    blocks = oracles.STAGE_TABLE_RESNEXT_AS_PRINTED
    assert 3 * sum(blocks) + 2 == 200
    assert 3 * sum(named_spec("resnext", 101).stage_blocks) + 2 == 101


@pytest.mark.parametrize("key", [k for k in ALL if k[0] != "densenet"])
def test_residual_depth_rule(key):
    spec = named_spec(*key)
    per_block = 2 if spec.variant is BlockVariant.BASIC else 3
    assert per_block * sum(spec.stage_blocks) + 2 == key[1]


def test_resnet18_spec():
    spec = named_spec("resnet", 18, 400)
    assert spec.stage_blocks == (2, 2, 2, 2)
    assert spec.variant is BlockVariant.BASIC and spec.shortcut_type == "A"
    assert meta_net("resnet", 18).feature_width == 512


def test_resnext101_spec():
    spec = named_spec("resnext", 101)
    assert spec.stage_blocks == (3, 4, 23, 3)
    assert spec.stage_widths == (128, 256, 512, 1024)
    net = meta_net("resnext", 101)
    assert net.feature_width == 2048
    grouped = {m.groups for _, m in named_modules(net) if isinstance(m, Conv3d) and m.groups > 1}
    assert grouped == {32}


def test_densenet121_widths():
    net = meta_net("densenet", 121)
    assert arch.dense_stage_widths(64, (6, 12, 24, 16), 32) == [64, 128, 256, 512]
    assert arch.dense_stage_widths(64, (6, 12, 48, 32), 32) == [64, 128, 256, 896]
    assert net.feature_width == 512 + 16 * 32 == 1024


def test_unknown_depth():
    with pytest.raises(ConfigError):
        named_spec("resnet", 77)


def test_cardinality_must_divide_widths():
    with pytest.raises(ConfigError):
        named_spec("resnext", 101, cardinality=48)


# ------------------------------------------------------------- param counts

@pytest.mark.parametrize("key", ALL)
def test_param_count_matches_analytic_oracle(key):
    net = meta_net(*key)
    expected = oracles.param_count(*key)
    assert count_params(net) == sum(expected.values())
    assert dict(stage_param_counts(net)) == expected


def test_param_count_single_conv():
    assert count_params(Conv3d(2, 3, 1)) == 6


@pytest.mark.parametrize("depths", [(18, 34), (50, 101, 152, 200)])
def test_resnet_depth_monotone_within_block_family(depths):
    counts = [count_params(meta_net("resnet", d)) for d in depths]
    assert all(a < b for a, b in zip(counts, counts[1:]))


def test_wrn50_larger_than_resnet152():
    assert count_params(meta_net("wrn", 50)) > count_params(meta_net("resnet", 152))


# ------------------------------------------------------------------- shapes

@pytest.mark.parametrize("clip_len", [16, 64])
@pytest.mark.parametrize("key", ALL)
def test_stage_shapes(key, clip_len):
    report = summarize_shapes(meta_net(*key, clip_len=clip_len), (1, 3, clip_len, 112, 112))
    for stage, shape in oracles.stage_shapes(*key, clip_len=clip_len).items():
        assert report.shape(stage) == shape, stage
    assert report.shape("fc") == (1, 400)


def test_resnet18_shape_example():
    r = summarize_shapes(meta_net("resnet", 18), (1, 3, 16, 112, 112))
    assert [row.shape for row in r][:6] == [(1, 64, 16, 56, 56), (1, 64, 8, 28, 28), (1, 64, 8, 28, 28),
                                           (1, 128, 4, 14, 14), (1, 256, 2, 7, 7), (1, 512, 1, 4, 4)]


def test_resnext101_64_frames():
    r = summarize_shapes(meta_net("resnext", 101, clip_len=64), (1, 3, 64, 112, 112))
    assert r.shape("conv5_x") == (1, 2048, 4, 4, 4)


def test_summarize_rejects_non_rgb():
    with pytest.raises(ShapeError):
        summarize_shapes(meta_net("resnet", 18), (1, 1, 16, 112, 112))


def test_report_table_and_json():
    r = summarize_shapes(meta_net("resnext", 101), (1, 3, 16, 112, 112))
    table = r.to_table()
    assert table.splitlines()[0].split()[:4] == ["stage", "output", "shape", "params"]
    conv3 = next(line for line in table.splitlines() if line.startswith("conv3_x"))
    assert conv3.split()[-1] == "32"
    rows = json.loads(r.to_json())
    assert all(set(row) == {"stage", "shape", "params"} for row in rows)
    assert sum(row["params"] for row in rows) == count_params(meta_net("resnext", 101))


def test_symbolic_shapes_match_real_forward():
    net = make_network(named_spec("densenet", 121, num_classes=5, width_divisor=8), seed=0)
    net.eval()
    x = Tensor(np.random.default_rng(0).standard_normal((1, 3, 16, 64, 64)))
    report = summarize_shapes(net, x.shape)
    h = x
    for (name, stage), row in zip(net.children(), report):
        h = stage(h)
        assert h.shape == row.shape, name


# -------------------------------------------------------- block structure

def test_downsampling_placement_residual():
    net = meta_net("resnet", 50)
    strided = {".".join(name.split(".")[:2]) for name, m in named_modules(net)
               if isinstance(m, Conv3d) and max(m.cfg.stride) > 1 and not name.startswith("conv1")}
    assert strided == {"conv3_x.block1", "conv4_x.block1", "conv5_x.block1"}


def test_downsampling_placement_dense():
    net = meta_net("densenet", 121)
    names = [n for n, _ in net.children()]
    assert [n for n in names if n.startswith("transition")] == ["transition1", "transition2", "transition3"]
    strided = [name for name, m in named_modules(net)
               if isinstance(m, Conv3d) and max(m.cfg.stride) > 1 and not name.startswith("conv1")]
    assert strided == []


def test_basic_block_identity_shortcut():
    b = make_block(BlockVariant.BASIC, 64, 64, 1, "A")
    assert b.output_shape((1, 64, 4, 8, 8)) == (1, 64, 4, 8, 8)
    assert "shortcut" not in dict(b.children())


def test_bottleneck_projection_shortcut():
    b = make_block(BlockVariant.BOTTLENECK, 256, 128, 2, "B")
    sc = dict(b.children())["shortcut"]
    conv = dict(sc.children())["conv"]
    assert conv.cfg.kernel == (1, 1, 1) and conv.cfg.stride == (2, 2, 2)
    assert conv.cfg.out_channels == 512
    assert b.output_shape((1, 256, 8, 8, 8)) == (1, 512, 4, 4, 4)
    assert count_params(sc) == 512 * 256 + 2 * 512


def test_dense_unit_concatenates():
    u = make_block(BlockVariant.DENSE_UNIT, 64, 32)
    assert u.output_shape((1, 64, 2, 4, 4)) == (1, 96, 2, 4, 4)


def test_shortcut_a_construction():
    x = np.random.default_rng(0).standard_normal((1, 64, 4, 6, 6)).astype(np.float32)
    out = arch.shortcut_a(Tensor(x), 128, 2).data
    assert out.shape == (1, 128, 2, 3, 3)
    assert np.array_equal(out[:, :64], x[:, :, ::2, ::2, ::2])
    assert not out[:, 64:].any()
    assert np.array_equal(arch.shortcut_a(Tensor(x), 64, 1).data, x)
    assert count_params(arch.ShortcutA(64, 128, 2)) == 0
    with pytest.raises(ShapeError):
        arch.shortcut_a(Tensor(x), 32, 1)


def test_forward_is_deterministic_in_inference():
    net = make_network(named_spec("resnet", 18, num_classes=3, width_divisor=16), seed=1).eval()
    x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 8, 32, 32)))
    assert np.array_equal(net(x).data, net(x).data)


def test_same_seed_same_weights():
    a = make_network(named_spec("resnet", 18, width_divisor=8), seed=5)
    b = make_network(named_spec("resnet", 18, width_divisor=8), seed=5)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)


def test_parameter_names_unique():
    for key in ALL:
        names = [n for n, _ in meta_net(*key).named_parameters()]
        assert len(names) == len(set(names))


# ------------------------------------------------------------- fine-tuning

def test_replace_classifier():
    net = make_network(named_spec("resnet", 18, width_divisor=8), seed=0)
    before = {n: p.data.copy() for n, p in net.named_parameters()}
    old = count_params(net)
    replace_classifier(net, 101, seed=3)
    after = dict(net.named_parameters())
    changed = {n for n in before if after[n].shape != before[n].shape}
    assert changed == {"fc.weight", "fc.bias"}
    for n, v in before.items():
        if not n.startswith("fc."):
            assert np.array_equal(after[n].data, v)
    f = net.feature_width
    assert old - count_params(net) == (f + 1) * 400 - (f + 1) * 101
    assert net.spec.num_classes == 101
    with pytest.raises(ConfigError):
        replace_classifier(net, 0)


def test_freeze_stages():
    net = meta_net("resnet", 50)
    freeze_stages(net, {"conv5_x", "fc"})
    for name, p in net.named_parameters():
        assert p.requires_grad == (name.startswith("conv5_x.") or name.startswith("fc."))
    with pytest.raises(ConfigError):
        freeze_stages(net, set())
    with pytest.raises(ConfigError):
        freeze_stages(net, {"conv9_x"})


def test_frozen_parameters_survive_a_step():
    from st3d.train import SGD
    net = make_network(named_spec("resnet", 18, num_classes=2, width_divisor=16), seed=0)
    freeze_stages(net, {"conv5_x", "fc"})
    before = {n: p.data.copy() for n, p in net.named_parameters()}
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 8, 32, 32)))
    backward(ops.softmax_cross_entropy(net(x), [0, 1]))
    SGD(net, 0.1).step()
    for n, p in net.named_parameters():
        frozen = not (n.startswith("conv5_x.") or n.startswith("fc."))
        assert np.array_equal(p.data, before[n]) == frozen, n


# ------------------------------------------------------ network gradients

def test_network_gradients_in_double_precision(monkeypatch):
    """Whole-network backward pass against central differences.

    Runs the engine in float64 so rectifier kinks and rounding do not swamp
    the comparison; the float32 check lives in the acceptance suite.
    """
    import st3d.layers
    import st3d.tensor
    from helpers import numeric_grad
    for module in (st3d.tensor, st3d.layers, ops):
        monkeypatch.setattr(module, "DTYPE", np.float64)
    net = make_network(named_spec("resnet", 18, 2, width_divisor=8), seed=0).train()
    for _, p in net.named_parameters():
        p.data = p.data.astype(np.float64)
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 3, 16, 56, 56)), requires_grad=True)
    assert x.data.dtype == np.float64

    def loss_value():
        return float(np.asarray(ops.softmax_cross_entropy(net(x), [0, 1]).data).item())

    backward(ops.softmax_cross_entropy(net(x), [0, 1]))
    for name, p in list(net.named_parameters()) + [("input", x)]:
        flat = p.grad.reshape(-1)
        idx = rng.choice(flat.size, size=min(2, flat.size), replace=False)
        for i, g in numeric_grad(loss_value, p.data, idx, 1e-6).items():
            assert abs(flat[i] - g) <= 1e-6 + 1e-3 * abs(g), (name, i, flat[i], g)
