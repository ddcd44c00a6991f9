"""Minimal module system: parameter registry, train/eval switch, symbolic shapes."""
from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .tensor import DTYPE, Tensor, as_tensor


class Module:
    """Container of named parameters, buffers and child modules.

    Children and parameters are kept in insertion order, which fixes the
    order of :meth:`named_parameters` and hence of checkpoints and optimizers.
    """

    def __init__(self):
        self._modules: dict[str, Module] = {}
        self._params: dict[str, Tensor] = {}
        self.training = True

    def add(self, name: str, module: "Module") -> "Module":
        self._modules[name] = module
        return module

    def __getattr__(self, name):
        modules = self.__dict__.get("_modules")
        if modules is not None and name in modules:
            return modules[name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def __call__(self, x):
        return self.forward(as_tensor(x))

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def output_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(self._modules.items())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
            m._on_mode_change(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def _on_mode_change(self, mode: bool) -> None:
        pass


_meta = False


@contextmanager
def meta_params() -> Iterator[None]:
    """Build layers with storage-free zero weights (inspection only, not trainable)."""
    global _meta
    prev, _meta = _meta, True
    try:
        yield
    finally:
        _meta = prev


def _weight(shape, fan_in: int, rng: Optional[np.random.Generator]) -> Tensor:
    if _meta:
        return Tensor.placeholder(shape, requires_grad=True)
    if rng is None:
        return Tensor(np.zeros(shape, DTYPE), requires_grad=True)
    return Tensor(he_normal(shape, fan_in, rng), requires_grad=True)


def he_normal(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)


class Conv3d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel, stride=1, padding=None,
                 groups: int = 1, rng: Optional[np.random.Generator] = None):
        super().__init__()
        kernel = ops.triple(kernel)
        if padding is None:
            padding = tuple(k // 2 for k in kernel)
        if groups < 1 or in_channels % groups:
            raise ConfigError(f"groups={groups} must divide in_channels={in_channels}")
        shape = (out_channels, in_channels // groups) + kernel
        fan_in = (in_channels // groups) * int(np.prod(kernel))
        self.cfg = ops.ConvParams(in_channels, out_channels, kernel, stride, padding, groups,
                                  weight=_weight(shape, fan_in, rng))
        self._params["weight"] = self.cfg.weight

    @property
    def groups(self) -> int:
        return self.cfg.groups

    def forward(self, x):
        return ops.conv3d(x, self.cfg)

    def output_shape(self, in_shape):
        return self.cfg.output_shape(in_shape)


class BatchNorm3d(Module):
    def __init__(self, num_channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.cfg = ops.BatchNormParams(num_channels, eps=eps, momentum=momentum)
        self._params["gamma"] = self.cfg.gamma
        self._params["beta"] = self.cfg.beta

    def named_buffers(self, prefix=""):
        yield prefix + "running_mean", self.cfg.running_mean
        yield prefix + "running_var", self.cfg.running_var

    def _on_mode_change(self, mode):
        self.cfg.training = mode

    def forward(self, x):
        return ops.batch_norm(x, self.cfg)

    def output_shape(self, in_shape):
        if in_shape[1] != self.cfg.num_channels:
            raise ShapeError(f"got {in_shape[1]} channels, expected {self.cfg.num_channels}", axis="c")
        return tuple(in_shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.weight = _weight((out_features, in_features), in_features, rng)
        self.bias = Tensor(np.zeros(out_features, DTYPE), requires_grad=True)
        self._params["weight"] = self.weight
        self._params["bias"] = self.bias

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def forward(self, x):
        if x.ndim != 2:
            x = ops.flatten(x)
        return ops.linear(x, self.weight, self.bias)

    def output_shape(self, in_shape):
        feats = int(np.prod(in_shape[1:]))
        if feats != self.in_features:
            raise ShapeError(f"got {feats} features, expected {self.in_features}", axis="f")
        return (in_shape[0], self.out_features)


class Pool3d(Module):
    def __init__(self, mode: str, kernel, stride, padding=0):
        super().__init__()
        self.mode = mode
        self.kernel, self.stride, self.padding = (ops.triple(v) for v in (kernel, stride, padding))

    def forward(self, x):
        return ops.pool3d(x, self.mode, self.kernel, self.stride, self.padding)

    def output_shape(self, in_shape):
        return tuple(in_shape[:2]) + ops.out_dims(in_shape[2:], self.kernel, self.stride, self.padding)


class GlobalAvgPool(Module):
    def forward(self, x):
        return ops.global_avg_pool(x)

    def output_shape(self, in_shape):
        return tuple(in_shape[:2]) + (1, 1, 1)

