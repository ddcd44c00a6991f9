"""3D residual network families: block constructors, stage assembly, inspection.

Every network shares one skeleton::

    conv1 (7x7x7, stride (1,2,2)) -> pool1 (3x3x3 max, stride 2)
    -> conv2_x -> conv3_x -> conv4_x -> conv5_x -> global_pool -> fc

Residual families down-sample in the first block of conv3_x, conv4_x and
conv5_x (stride 2 on all three axes).  DenseNet keeps stride 1 inside its
stages and inserts a transition (BN-ReLU, 3x3x3 conv halving the channels,
2x2x2 average pool with stride 2) after conv2_x, conv3_x and conv4_x.
Softmax is not part of the network; it returns logits.
"""
from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .layers import BatchNorm3d, Conv3d, GlobalAvgPool, Linear, Module, Pool3d, meta_params
from .tensor import Tensor

STAGES = ("conv2_x", "conv3_x", "conv4_x", "conv5_x")


class BlockVariant(str, enum.Enum):
    BASIC = "basic"
    BOTTLENECK = "bottleneck"
    PREACT_BOTTLENECK = "preact_bottleneck"
    WIDE_BOTTLENECK = "wide_bottleneck"
    RESNEXT_BOTTLENECK = "resnext_bottleneck"
    DENSE_UNIT = "dense_unit"


# output channels of a block relative to its stage width F
EXPANSION = {
    BlockVariant.BASIC: 1,
    BlockVariant.BOTTLENECK: 4,
    BlockVariant.PREACT_BOTTLENECK: 4,
    BlockVariant.WIDE_BOTTLENECK: 2,
    BlockVariant.RESNEXT_BOTTLENECK: 2,
}

_BASE_WIDTHS = (64, 128, 256, 512)

# (model, depth) -> (block variant, stage widths F, blocks per stage N)
ARCHITECTURES = {
    ("resnet", 18): (BlockVariant.BASIC, _BASE_WIDTHS, (2, 2, 2, 2)),
    ("resnet", 34): (BlockVariant.BASIC, _BASE_WIDTHS, (3, 4, 6, 3)),
    ("resnet", 50): (BlockVariant.BOTTLENECK, _BASE_WIDTHS, (3, 4, 6, 3)),
    ("resnet", 101): (BlockVariant.BOTTLENECK, _BASE_WIDTHS, (3, 4, 23, 3)),
    ("resnet", 152): (BlockVariant.BOTTLENECK, _BASE_WIDTHS, (3, 8, 36, 3)),
    ("resnet", 200): (BlockVariant.BOTTLENECK, _BASE_WIDTHS, (3, 24, 36, 3)),
    ("preact_resnet", 200): (BlockVariant.PREACT_BOTTLENECK, _BASE_WIDTHS, (3, 24, 36, 3)),
    ("wrn", 50): (BlockVariant.WIDE_BOTTLENECK, _BASE_WIDTHS, (3, 4, 6, 3)),
    ("resnext", 101): (BlockVariant.RESNEXT_BOTTLENECK, (128, 256, 512, 1024), (3, 4, 23, 3)),
    ("densenet", 121): (BlockVariant.DENSE_UNIT, (64, 128, 256, 512), (6, 12, 24, 16)),
    ("densenet", 201): (BlockVariant.DENSE_UNIT, (64, 128, 256, 896), (6, 12, 48, 32)),
}

MODEL_ALIASES = {"preact": "preact_resnet", "pre-act": "preact_resnet",
                 "wideresnet": "wrn", "wide_resnet": "wrn"}


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative description of one architecture.

    ``stage_widths`` are the F values: bottleneck inner width for residual
    families (already multiplied by the widening factor for WRN) and the
    input width of each dense stage for DenseNet.
    """

    variant: BlockVariant
    stage_widths: tuple
    stage_blocks: tuple
    num_classes: int = 400
    clip_len: int = 16
    shortcut_type: str = "B"
    cardinality: int = 32
    growth_rate: int = 32
    widening_factor: int = 2
    stem_width: int = 64
    model: str = "custom"
    depth: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", BlockVariant(self.variant))
        object.__setattr__(self, "stage_widths", tuple(int(v) for v in self.stage_widths))
        object.__setattr__(self, "stage_blocks", tuple(int(v) for v in self.stage_blocks))
        if len(self.stage_widths) != 4 or len(self.stage_blocks) != 4:
            raise ConfigError("stage_widths and stage_blocks need one entry per stage (4)")
        if min(self.stage_widths) < 1 or min(self.stage_blocks) < 1:
            raise ConfigError("stage widths and block counts must be positive")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        if self.clip_len < 1:
            raise ConfigError(f"clip_len must be positive, got {self.clip_len}")
        if self.shortcut_type not in ("A", "B"):
            raise ConfigError(f"shortcut_type must be 'A' or 'B', got {self.shortcut_type!r}")
        if self.variant is BlockVariant.RESNEXT_BOTTLENECK:
            for f in self.stage_widths:
                if f % self.cardinality:
                    raise ConfigError(f"cardinality {self.cardinality} does not divide width {f}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        d["stage_widths"] = list(self.stage_widths)
        d["stage_blocks"] = list(self.stage_blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


def named_spec(model: str, depth: int, num_classes: int = 400, clip_len: int = 16,
               width_divisor: int = 1, shortcut_type: Optional[str] = None,
               cardinality: int = 32, growth_rate: int = 32,
               widening_factor: int = 2) -> NetworkSpec:
    """Spec for a named architecture such as ``("resnet", 18)``.

    ``width_divisor`` shrinks every channel count (stem, F, growth rate) for
    desk-scale experiments; 1 reproduces the published widths.
    """
    model = MODEL_ALIASES.get(model.lower(), model.lower())
    key = (model, int(depth))
    if key not in ARCHITECTURES:
        known = ", ".join(f"{m}-{d}" for m, d in ARCHITECTURES)
        raise ConfigError(f"unknown architecture {model}-{depth}; known: {known}")
    variant, widths, blocks = ARCHITECTURES[key]
    if variant is BlockVariant.WIDE_BOTTLENECK:
        widths = tuple(w * widening_factor for w in widths)
    if shortcut_type is None:
        shortcut_type = "A" if variant is BlockVariant.BASIC else "B"
    d = int(width_divisor)
    if d < 1:
        raise ConfigError("width_divisor must be a positive integer")
    for v in (64, growth_rate) + tuple(widths):
        if v % d:
            raise ConfigError(f"width_divisor {d} does not divide channel count {v}")
    return NetworkSpec(variant=variant, stage_widths=tuple(w // d for w in widths),
                       stage_blocks=blocks, num_classes=num_classes, clip_len=clip_len,
                       shortcut_type=shortcut_type, cardinality=cardinality,
                       growth_rate=growth_rate // d, widening_factor=widening_factor,
                       stem_width=64 // d, model=model, depth=int(depth))


# ------------------------------------------------------------------- blocks

class ShortcutA(Module):
    """Parameter-free shortcut: strided subsampling, then zero channels appended."""

    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        if out_channels < in_channels:
            raise ConfigError(f"type A shortcut cannot map {in_channels} to {out_channels} channels")
        self.in_channels, self.out_channels, self.stride = in_channels, out_channels, stride

    def forward(self, x):
        return shortcut_a(x, self.out_channels, self.stride)

    def output_shape(self, in_shape):
        n, c = in_shape[:2]
        dims = ops.out_dims(in_shape[2:], (1, 1, 1), ops.triple(self.stride), (0, 0, 0))
        return (n, self.out_channels) + dims


def shortcut_a(x: Tensor, out_channels: int, stride: int) -> Tensor:
    """Identity shortcut with 1x1x1 average-pool subsampling and zero channel padding."""
    if out_channels < x.shape[1]:
        raise ShapeError(f"cannot zero-pad {x.shape[1]} channels to {out_channels}", axis="c")
    return ops.pad_channels(ops.subsample(x, stride), out_channels)


class Projection(Module):
    """Type B shortcut: 1x1x1 convolution with the block's stride, then batch norm."""

    def __init__(self, in_channels, out_channels, stride, rng):
        super().__init__()
        self.add("conv", Conv3d(in_channels, out_channels, 1, stride, 0, rng=rng))
        self.add("bn", BatchNorm3d(out_channels))

    def forward(self, x):
        return self.bn(self.conv(x))

    def output_shape(self, in_shape):
        return self.conv.output_shape(in_shape)


def _make_shortcut(in_ch, out_ch, stride, shortcut_type, rng) -> Optional[Module]:
    if in_ch == out_ch and stride == 1:
        return None
    if shortcut_type == "A":
        return ShortcutA(in_ch, out_ch, stride)
    return Projection(in_ch, out_ch, stride, rng)


class _Residual(Module):
    """Shared plumbing: residual branch ``layers`` plus optional shortcut."""

    out_channels: int

    def _shortcut(self, x):
        sc = self._modules.get("shortcut")
        return x if sc is None else sc(x)

    def output_shape(self, in_shape):
        shape = tuple(in_shape)
        for name, m in self.children():
            if name != "shortcut":
                shape = m.output_shape(shape)
        sc = self._modules.get("shortcut")
        sc_shape = tuple(in_shape) if sc is None else sc.output_shape(in_shape)
        if sc_shape != shape:
            raise ShapeError(f"residual branch {shape} and shortcut {sc_shape} disagree")
        return shape


class BasicBlock(_Residual):
    def __init__(self, in_ch, width, stride=1, shortcut_type="A", rng=None):
        super().__init__()
        self.out_channels = width
        self.add("conv1", Conv3d(in_ch, width, 3, stride, rng=rng))
        self.add("bn1", BatchNorm3d(width))
        self.add("conv2", Conv3d(width, width, 3, 1, rng=rng))
        self.add("bn2", BatchNorm3d(width))
        sc = _make_shortcut(in_ch, width, stride, shortcut_type, rng)
        if sc is not None:
            self.add("shortcut", sc)

    def forward(self, x):
        out = ops.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return ops.relu(ops.add(out, self._shortcut(x)))


class Bottleneck(_Residual):
    """1x1x1 -> 3x3x3 (strided, optionally grouped) -> 1x1x1 expansion, post-activation."""

    def __init__(self, in_ch, width, stride=1, shortcut_type="B", expansion=4, groups=1, rng=None):
        super().__init__()
        out = width * expansion
        self.out_channels = out
        self.add("conv1", Conv3d(in_ch, width, 1, 1, rng=rng))
        self.add("bn1", BatchNorm3d(width))
        self.add("conv2", Conv3d(width, width, 3, stride, groups=groups, rng=rng))
        self.add("bn2", BatchNorm3d(width))
        self.add("conv3", Conv3d(width, out, 1, 1, rng=rng))
        self.add("bn3", BatchNorm3d(out))
        sc = _make_shortcut(in_ch, out, stride, shortcut_type, rng)
        if sc is not None:
            self.add("shortcut", sc)

    def forward(self, x):
        out = ops.relu(self.bn1(self.conv1(x)))
        out = ops.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return ops.relu(ops.add(out, self._shortcut(x)))


class PreActBottleneck(_Residual):
    """BN-ReLU precedes every convolution; the sum is not followed by a ReLU."""

    def __init__(self, in_ch, width, stride=1, shortcut_type="B", rng=None):
        super().__init__()
        out = width * EXPANSION[BlockVariant.PREACT_BOTTLENECK]
        self.out_channels = out
        self.add("bn1", BatchNorm3d(in_ch))
        self.add("conv1", Conv3d(in_ch, width, 1, 1, rng=rng))
        self.add("bn2", BatchNorm3d(width))
        self.add("conv2", Conv3d(width, width, 3, stride, rng=rng))
        self.add("bn3", BatchNorm3d(width))
        self.add("conv3", Conv3d(width, out, 1, 1, rng=rng))
        sc = _make_shortcut(in_ch, out, stride, shortcut_type, rng)
        if sc is not None:
            self.add("shortcut", sc)

    def forward(self, x):
        out = self.conv1(ops.relu(self.bn1(x)))
        out = self.conv2(ops.relu(self.bn2(out)))
        out = self.conv3(ops.relu(self.bn3(out)))
        return ops.add(out, self._shortcut(x))


class DenseUnit(Module):
    """BN-ReLU-1x1x1(4k)-BN-ReLU-3x3x3(k); the k new maps are appended to the input."""

    def __init__(self, in_ch, growth_rate, rng=None):
        super().__init__()
        self.out_channels = in_ch + growth_rate
        self.add("bn1", BatchNorm3d(in_ch))
        self.add("conv1", Conv3d(in_ch, 4 * growth_rate, 1, 1, rng=rng))
        self.add("bn2", BatchNorm3d(4 * growth_rate))
        self.add("conv2", Conv3d(4 * growth_rate, growth_rate, 3, 1, rng=rng))

    def forward(self, x):
        new = self.conv1(ops.relu(self.bn1(x)))
        new = self.conv2(ops.relu(self.bn2(new)))
        return ops.concat_channels(x, new)

    def output_shape(self, in_shape):
        shape = self.bn1.output_shape(in_shape)
        shape = self.conv2.output_shape(self.conv1.output_shape(shape))
        return (shape[0], in_shape[1] + shape[1]) + tuple(shape[2:])


class Transition(Module):
    """BN-ReLU, 3x3x3 convolution to ``out_ch`` maps, 2x2x2 average pool with stride 2."""

    def __init__(self, in_ch, out_ch, rng=None):
        super().__init__()
        self.out_channels = out_ch
        self.add("bn", BatchNorm3d(in_ch))
        self.add("conv", Conv3d(in_ch, out_ch, 3, 1, rng=rng))
        self.add("pool", Pool3d("avg", 2, 2, 0))

    def forward(self, x):
        return self.pool(self.conv(ops.relu(self.bn(x))))

    def output_shape(self, in_shape):
        return self.pool.output_shape(self.conv.output_shape(self.bn.output_shape(in_shape)))


def make_block(variant, in_ch: int, width: int, stride: int = 1, shortcut_type: str = "B",
               cardinality: int = 32, rng: Optional[np.random.Generator] = None) -> Module:
    """Construct one block.  For the dense unit ``width`` is the growth rate."""
    variant = BlockVariant(variant)
    if stride not in (1, 2):
        raise ConfigError(f"block stride must be 1 or 2, got {stride}")
    if in_ch < 1:
        raise ConfigError("block input width must be positive")
    if variant is BlockVariant.BASIC:
        return BasicBlock(in_ch, width, stride, shortcut_type, rng)
    if variant is BlockVariant.BOTTLENECK:
        return Bottleneck(in_ch, width, stride, shortcut_type, 4, 1, rng)
    if variant is BlockVariant.WIDE_BOTTLENECK:
        return Bottleneck(in_ch, width, stride, shortcut_type, 2, 1, rng)
    if variant is BlockVariant.RESNEXT_BOTTLENECK:
        return Bottleneck(in_ch, width, stride, shortcut_type, 2, cardinality, rng)
    if variant is BlockVariant.PREACT_BOTTLENECK:
        return PreActBottleneck(in_ch, width, stride, shortcut_type, rng)
    if stride != 1:
        raise ConfigError("dense units never down-sample")
    return DenseUnit(in_ch, width, rng)


# ------------------------------------------------------------------ network

class Stem(Module):
    def __init__(self, width, rng=None):
        super().__init__()
        self.add("conv", Conv3d(3, width, 7, (1, 2, 2), (3, 3, 3), rng=rng))
        self.add("bn", BatchNorm3d(width))

    def forward(self, x):
        return ops.relu(self.bn(self.conv(x)))

    def output_shape(self, in_shape):
        return self.conv.output_shape(in_shape)


class Stage(Module):
    """Sequence of blocks ``block1 .. blockN`` with an optional closing BN-ReLU."""

    def __init__(self, blocks: Iterable[Module], final_bn: Optional[int] = None):
        super().__init__()
        for i, b in enumerate(blocks, 1):
            self.add(f"block{i}", b)
        if final_bn is not None:
            self.add("final_bn", BatchNorm3d(final_bn))

    def forward(self, x):
        for name, m in self.children():
            x = m(x)
            if name == "final_bn":
                x = ops.relu(x)
        return x

    def output_shape(self, in_shape):
        for _, m in self.children():
            in_shape = m.output_shape(in_shape)
        return in_shape


class Network(Module):
    """Stages in fixed order, each registered under its stage name."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec

    @property
    def stage_names(self) -> list[str]:
        return list(self._modules)

    @property
    def feature_width(self) -> int:
        return self._modules["fc"].in_features

    def forward(self, x):
        for name, m in self.children():
            x = m(x)
        return x

    def output_shape(self, in_shape):
        for _, m in self.children():
            in_shape = m.output_shape(in_shape)
        return in_shape


def dense_stage_widths(stem_width: int, blocks, growth_rate: int) -> list[int]:
    """Input width of each dense stage: transitions halve the accumulated width."""
    widths = [stem_width]
    for n in blocks[:-1]:
        widths.append((widths[-1] + n * growth_rate) // 2)
    return widths


def make_network(spec: NetworkSpec, seed: Optional[int] = 0) -> Network:
    """Build a network from ``spec``.

    Convolution and linear weights get He fan-in normal initialization from
    ``numpy.random.default_rng(seed)``.  With ``seed=None`` they are read-only
    zero placeholders that allocate no memory: enough for shape and parameter
    inspection, or as a target for loading checkpoint tensors.
    """
    if seed is None:
        with meta_params():
            return _assemble(spec, None)
    return _assemble(spec, np.random.default_rng(seed))


def _assemble(spec: NetworkSpec, rng) -> Network:
    net = Network(spec)
    v = spec.variant
    net.add("conv1", Stem(spec.stem_width, rng))
    net.add("pool1", Pool3d("max", 3, 2, 1))
    ch = spec.stem_width
    if v is BlockVariant.DENSE_UNIT:
        expected = dense_stage_widths(spec.stem_width, spec.stage_blocks, spec.growth_rate)
        if list(spec.stage_widths) != expected:
            raise ConfigError(f"dense stage widths {list(spec.stage_widths)} disagree with "
                              f"channel bookkeeping {expected}")
        for i, (stage, n) in enumerate(zip(STAGES, spec.stage_blocks)):
            units = []
            for _ in range(n):
                units.append(DenseUnit(ch, spec.growth_rate, rng))
                ch += spec.growth_rate
            last = i == len(STAGES) - 1
            net.add(stage, Stage(units, final_bn=ch if last else None))
            if not last:
                out = ch // 2
                net.add(f"transition{i + 1}", Transition(ch, out, rng))
                ch = out
    else:
        for i, (stage, width, n) in enumerate(zip(STAGES, spec.stage_widths, spec.stage_blocks)):
            blocks = []
            for j in range(n):
                stride = 2 if (i > 0 and j == 0) else 1
                b = make_block(v, ch, width, stride, spec.shortcut_type, spec.cardinality, rng)
                blocks.append(b)
                ch = b.out_channels
            last = i == len(STAGES) - 1
            final = ch if (last and v is BlockVariant.PREACT_BOTTLENECK) else None
            net.add(stage, Stage(blocks, final_bn=final))
    net.add("global_pool", GlobalAvgPool())
    net.add("fc", Linear(ch, spec.num_classes, rng))
    return net


def build_model(model: str, depth: int, num_classes: int = 400, clip_len: int = 16,
                width_divisor: int = 1, seed: Optional[int] = 0, **kwargs) -> Network:
    return make_network(named_spec(model, depth, num_classes, clip_len, width_divisor, **kwargs), seed)


# ---------------------------------------------------------------- inspection

def count_params(net: Module) -> int:
    """Total number of trainable scalars (conv, BN affine, linear); running stats excluded."""
    return sum(p.size for p in net.parameters())


def stage_param_counts(net: Network) -> dict[str, int]:
    return {name: sum(p.size for p in m.parameters()) for name, m in net.children()}


def _max_groups(m: Module) -> int:
    return max((x.groups for x in m.modules() if isinstance(x, Conv3d)), default=1)


@dataclass(frozen=True)
class StageShape:
    stage: str
    shape: tuple
    params: int
    groups: int = 1


class ShapeReport(list):
    """List of :class:`StageShape` rows in stage order."""

    def __getitem__(self, key):
        if isinstance(key, str):
            for row in self:
                if row.stage == key:
                    return row
            raise KeyError(key)
        return super().__getitem__(key)

    def shape(self, stage: str) -> tuple:
        return self[stage].shape

    def to_table(self) -> str:
        header = ("stage", "output shape", "params", "groups")
        rows = [(r.stage, _fmt_shape(r.shape), f"{r.params:,}", str(r.groups)) for r in self]
        total = sum(r.params for r in self)
        widths = [max(len(str(c)) for c in col) for col in zip(header, *rows, ("total", "", f"{total:,}", ""))]

        def line(cells):
            return "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()

        out = [line(header), line("-" * w for w in widths)]
        out += [line(r) for r in rows]
        out.append(line(("total", "", f"{total:,}", "")))
        return "\n".join(out)

    def to_json(self) -> str:
        return json.dumps([{"stage": r.stage, "shape": list(r.shape), "params": r.params}
                           for r in self], indent=2)


def _fmt_shape(shape) -> str:
    return "(" + ",".join(str(s) for s in shape) + ")"


def summarize_shapes(net: Network, input_shape) -> ShapeReport:
    """Per-stage output shapes by symbolic propagation (no arithmetic on data)."""
    shape = tuple(int(s) for s in input_shape)
    if len(shape) != 5 or shape[1] != 3:
        raise ShapeError(f"input must be (n, 3, t, h, w), got {shape}", axis="c")
    report = ShapeReport()
    for name, m in net.children():
        try:
            shape = m.output_shape(shape)
        except ShapeError as e:
            raise ShapeError(f"stage {name} cannot consume its input: {e}") from e
        report.append(StageShape(name, shape, sum(p.size for p in m.parameters()), _max_groups(m)))
    return report


# --------------------------------------------------------------- fine-tuning

def replace_classifier(net: Network, num_classes: int, seed: Optional[int] = 0) -> Network:
    """Swap in a freshly initialized ``num_classes``-way head; other parameters untouched."""
    if num_classes < 1:
        raise ConfigError(f"num_classes must be positive, got {num_classes}")
    rng = None if seed is None else np.random.default_rng(seed)
    fc = Linear(net.feature_width, num_classes, rng)
    fc.train(net.training)
    net._modules["fc"] = fc
    net.spec = dataclasses.replace(net.spec, num_classes=num_classes)
    return net


def _under(name: str, prefix: str) -> bool:
    return name == prefix or name.startswith(prefix + ".")


def freeze_stages(net: Module, trainable: Iterable[str]) -> None:
    """Make exactly the parameters under the ``trainable`` name prefixes require gradients."""
    prefixes = list(trainable)
    if not prefixes:
        raise ConfigError("at least one trainable prefix is required")
    named = list(net.named_parameters())
    for pre in prefixes:
        if not any(_under(n, pre) for n, _ in named):
            raise ConfigError(f"prefix {pre!r} matches no parameter")
    for n, p in named:
        p.requires_grad = any(_under(n, pre) for pre in prefixes)
        if not p.requires_grad:
            p.grad = None
