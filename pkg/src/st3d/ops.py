"""Differentiable layer primitives over (n, c, t, h, w) float32 tensors.

Each function computes its forward result with numpy and, when any input is
tracked, records the matching backward rule on the tape (see
:mod:`st3d.tensor`).  Convolution is cross-correlation (no kernel flip).

The optimized convolution lowers each group to one matrix product over an
im2col patch matrix; :func:`conv3d_reference` is the plain nested-loop
version the fast path is tested against.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DegenerateBatchError, ShapeError
from .tensor import DTYPE, Tensor, as_tensor, record

_AXES = ("t", "h", "w")
# patch-matrix elements materialized per batch chunk
_COL_BUDGET = 1 << 24


def triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ConfigError(f"expected 3 values, got {v}")
    return v


def out_dim(size: int, kernel: int, stride: int, pad: int) -> int:
    """Output length along one axis: floor((size + 2*pad - kernel) / stride) + 1."""
    return (size + 2 * pad - kernel) // stride + 1


def out_dims(spatial, kernel, stride, padding) -> tuple[int, int, int]:
    dims = []
    for name, n, k, s, p in zip(_AXES, spatial, kernel, stride, padding):
        if s < 1:
            raise ConfigError(f"stride must be positive on axis {name}")
        d = out_dim(n, k, s, p)
        if d < 1:
            raise ShapeError(f"input length {n} with kernel {k}, stride {s}, "
                             f"padding {p} gives no output", axis=name)
        dims.append(d)
    return tuple(dims)


def _require_5d(x: Tensor, op: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{op} expects a 5-D (n, c, t, h, w) tensor, got shape {x.shape}")


def _pad_spatial(x: np.ndarray, padding, value=0.0) -> np.ndarray:
    if not any(padding):
        return x
    widths = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    return np.pad(x, widths, mode="constant", constant_values=value)


def _crop_spatial(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    pt, ph, pw = padding
    return x[:, :, pt:x.shape[2] - pt, ph:x.shape[3] - ph, pw:x.shape[4] - pw]


def _window_slices(offset, stride, out):
    return tuple(slice(o, o + s * (d - 1) + 1, s) for o, s, d in zip(offset, stride, out))


def _kernel_offsets(kernel):
    return np.ndindex(*kernel)


# ---------------------------------------------------------------- convolution

@dataclass(eq=False)
class ConvParams:
    """Configuration and weight of one bias-free 3D convolution."""

    in_channels: int
    out_channels: int
    kernel: tuple
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)
    groups: int = 1
    weight: Optional[Tensor] = field(default=None, repr=False)

    def __post_init__(self):
        self.kernel = triple(self.kernel)
        self.stride = triple(self.stride)
        self.padding = triple(self.padding)
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}")
        shape = self.weight_shape
        if self.weight is None:
            self.weight = Tensor(np.zeros(shape, DTYPE), requires_grad=True)
        elif self.weight.shape != shape:
            raise ShapeError(f"weight has shape {self.weight.shape}, expected {shape}")

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups) + self.kernel

    def output_shape(self, in_shape) -> tuple:
        n, c = in_shape[:2]
        if c != self.in_channels:
            raise ShapeError(f"got {c} input channels, expected {self.in_channels}", axis="c")
        return (n, self.out_channels) + out_dims(in_shape[2:], self.kernel, self.stride, self.padding)


def _im2col(xp: np.ndarray, kernel, stride, out, groups) -> np.ndarray:
    """Patch matrix of shape (n, groups, cg*kt*kh*kw, ot*oh*ow)."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    win = win[:, :, ::stride[0], ::stride[1], ::stride[2]]
    win = win[:, :, :out[0], :out[1], :out[2]]
    win = win.reshape((n, groups, c // groups) + tuple(out) + tuple(kernel))
    win = win.transpose(0, 1, 2, 6, 7, 8, 3, 4, 5)
    return win.reshape(n, groups, -1, out[0] * out[1] * out[2])


def _col2im(cols: np.ndarray, xp_shape, kernel, stride, out, groups) -> np.ndarray:
    n, c = xp_shape[:2]
    cols = cols.reshape((n, c) + tuple(kernel) + tuple(out))
    dxp = np.zeros(xp_shape, DTYPE)
    for a, b, d in _kernel_offsets(kernel):
        dxp[(slice(None), slice(None)) + _window_slices((a, b, d), stride, out)] += cols[:, :, a, b, d]
    return dxp


def _batch_chunks(n: int, per_sample: int):
    step = max(1, _COL_BUDGET // max(per_sample, 1))
    return [slice(i, min(i + step, n)) for i in range(0, n, step)]


def _conv_forward(x: np.ndarray, w: np.ndarray, stride, padding, groups) -> np.ndarray:
    n = x.shape[0]
    oc = w.shape[0]
    kernel = w.shape[2:]
    out = out_dims(x.shape[2:], kernel, stride, padding)
    p = out[0] * out[1] * out[2]
    wg = w.reshape(groups, oc // groups, -1)
    y = np.empty((n, groups, oc // groups, p), DTYPE)
    if kernel == (1, 1, 1) and not any(padding):
        xs = x[:, :, ::stride[0], ::stride[1], ::stride[2]]
        xs = xs.reshape(n, groups, -1, p)
        np.matmul(wg, xs, out=y)
        return y.reshape((n, oc) + out)
    xp = _pad_spatial(x, padding)
    for sl in _batch_chunks(n, wg.shape[2] * groups * p):
        cols = _im2col(xp[sl], kernel, stride, out, groups)
        np.matmul(wg, cols, out=y[sl])
    return y.reshape((n, oc) + out)


def _conv_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray, stride, padding, groups,
                   need_x: bool, need_w: bool):
    n, c = x.shape[:2]
    oc = w.shape[0]
    kernel = w.shape[2:]
    out = g.shape[2:]
    p = out[0] * out[1] * out[2]
    wg = w.reshape(groups, oc // groups, -1)
    gg = g.reshape(n, groups, oc // groups, p)
    dx = dw = None
    if kernel == (1, 1, 1) and not any(padding):
        if need_w:
            xs = x[:, :, ::stride[0], ::stride[1], ::stride[2]].reshape(n, groups, -1, p)
            dw = np.matmul(gg, xs.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
        if need_x:
            dxs = np.matmul(wg.transpose(0, 2, 1), gg).reshape((n, c) + tuple(out))
            if stride == (1, 1, 1):
                dx = dxs
            else:
                dx = np.zeros_like(x)
                dx[:, :, ::stride[0], ::stride[1], ::stride[2]] = dxs
        return dx, dw
    xp = _pad_spatial(x, padding)
    if need_w:
        dw = np.zeros_like(wg)
    if need_x:
        dxp = np.empty(xp.shape, DTYPE)
    wt = wg.transpose(0, 2, 1)
    for sl in _batch_chunks(n, wg.shape[2] * groups * p):
        if need_w:
            cols = _im2col(xp[sl], kernel, stride, out, groups)
            dw += np.matmul(gg[sl], cols.transpose(0, 1, 3, 2)).sum(axis=0)
        if need_x:
            dcols = np.matmul(wt, gg[sl])
            dxp[sl] = _col2im(dcols, xp[sl].shape, kernel, stride, out, groups)
    if need_x:
        dx = _crop_spatial(dxp, padding)
    return dx, (dw.reshape(w.shape) if need_w else None)


def conv3d(input: Tensor, params: ConvParams) -> Tensor:
    """Grouped, bias-free 3D cross-correlation with zero padding.

    Output shape is ``(n, out_channels, t', h', w')`` with each spatial extent
    given by :func:`out_dim`.
    """
    _require_5d(input, "conv3d")
    params.output_shape(input.shape)
    x = input.data
    w = params.weight.data
    stride, padding, groups = params.stride, params.padding, params.groups
    y = _conv_forward(x, w, stride, padding, groups)

    def backward_fn(g, needs):
        dx, dw = _conv_backward(x, w, g, stride, padding, groups, needs[0], needs[1])
        return dx, dw

    return record("conv3d", y, (input, params.weight), backward_fn)


def conv3d_reference(x: np.ndarray, w: np.ndarray, stride=1, padding=0, groups: int = 1) -> np.ndarray:
    """Direct nested-loop convolution, accumulated in float64.

    Slow by design; it exists as the oracle for the im2col path.
    """
    stride, padding = triple(stride), triple(padding)
    n, c, t, h, wd = x.shape
    oc, cg, kt, kh, kw = w.shape
    og = oc // groups
    ot, oh, ow = out_dims((t, h, wd), (kt, kh, kw), stride, padding)
    xp = _pad_spatial(x.astype(np.float64), padding)
    w64 = w.astype(np.float64)
    y = np.zeros((n, oc, ot, oh, ow))
    for b in range(n):
        for o in range(oc):
            g0 = (o // og) * cg
            for i in range(ot):
                for j in range(oh):
                    for k in range(ow):
                        t0, h0, w0 = i * stride[0], j * stride[1], k * stride[2]
                        acc = 0.0
                        for ci in range(cg):
                            patch = xp[b, g0 + ci, t0:t0 + kt, h0:h0 + kh, w0:w0 + kw]
                            acc += float(np.sum(patch * w64[o, ci]))
                        y[b, o, i, j, k] = acc
    return y.astype(DTYPE)


# ------------------------------------------------------------- normalization

@dataclass(eq=False)
class BatchNormParams:
    """Per-channel affine parameters and running statistics."""

    num_channels: int
    eps: float = 1e-5
    momentum: float = 0.1
    training: bool = True
    gamma: Optional[Tensor] = field(default=None, repr=False)
    beta: Optional[Tensor] = field(default=None, repr=False)
    running_mean: Optional[np.ndarray] = field(default=None, repr=False)
    running_var: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        c = self.num_channels
        if self.gamma is None:
            self.gamma = Tensor(np.ones(c, DTYPE), requires_grad=True)
        if self.beta is None:
            self.beta = Tensor(np.zeros(c, DTYPE), requires_grad=True)
        if self.running_mean is None:
            self.running_mean = np.zeros(c, DTYPE)
        if self.running_var is None:
            self.running_var = np.ones(c, DTYPE)
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in (0, 1), got {self.momentum}")
        for name in ("gamma", "beta"):
            if getattr(self, name).shape != (c,):
                raise ShapeError(f"{name} must have length {c}", axis="c")
        for name in ("running_mean", "running_var"):
            if np.shape(getattr(self, name)) != (c,):
                raise ShapeError(f"{name} must have length {c}", axis="c")


_BN_AXES = (0, 2, 3, 4)


def _bcast(v: np.ndarray) -> np.ndarray:
    return v.reshape(1, -1, 1, 1, 1)


def batch_norm(input: Tensor, params: BatchNormParams) -> Tensor:
    """Normalize each channel over (n, t, h, w), then scale by gamma and shift by beta.

    In training mode batch statistics are used (biased variance) and the
    running statistics are updated in place; otherwise the running
    statistics are used and the op is a fixed affine map.
    """
    _require_5d(input, "batch_norm")
    if input.shape[1] != params.num_channels:
        raise ShapeError(f"got {input.shape[1]} channels, expected {params.num_channels}", axis="c")
    x = input.data
    gamma, beta = params.gamma.data, params.beta.data
    eps = params.eps
    if params.training:
        count = x.size // x.shape[1] if x.shape[1] else 0
        if count == 0:
            raise DegenerateBatchError("batch_norm in training mode needs at least one element per channel")
        mean = x.mean(axis=_BN_AXES, dtype=np.float64).astype(DTYPE)
        xc = x - _bcast(mean)
        var = (xc * xc).mean(axis=_BN_AXES, dtype=np.float64).astype(DTYPE)
        inv_std = (1.0 / np.sqrt(var + eps)).astype(DTYPE)
        xhat = xc * _bcast(inv_std)
        y = xhat * _bcast(gamma) + _bcast(beta)
        m = params.momentum
        unbiased = var * (count / (count - 1)) if count > 1 else var
        params.running_mean[...] = (1 - m) * params.running_mean + m * mean
        params.running_var[...] = (1 - m) * params.running_var + m * unbiased

        def backward_fn(g, needs):
            dgamma = (g * xhat).sum(axis=_BN_AXES) if needs[1] else None
            dbeta = g.sum(axis=_BN_AXES) if needs[2] else None
            dx = None
            if needs[0]:
                dxhat = g * _bcast(gamma)
                s1 = dxhat.mean(axis=_BN_AXES, keepdims=True)
                s2 = (dxhat * xhat).mean(axis=_BN_AXES, keepdims=True)
                dx = (dxhat - s1 - xhat * s2) * _bcast(inv_std)
            return dx, dgamma, dbeta
    else:
        inv_std = (1.0 / np.sqrt(params.running_var.astype(DTYPE) + DTYPE(eps))).astype(DTYPE)
        scale = gamma * inv_std
        shift = beta - params.running_mean * scale
        y = x * _bcast(scale) + _bcast(shift)
        rm = params.running_mean.copy()

        def backward_fn(g, needs):
            dx = g * _bcast(scale) if needs[0] else None
            dgamma = (g * (x - _bcast(rm)) * _bcast(inv_std)).sum(axis=_BN_AXES) if needs[1] else None
            dbeta = g.sum(axis=_BN_AXES) if needs[2] else None
            return dx, dgamma, dbeta

    return record("batch_norm", y, (input, params.gamma, params.beta), backward_fn)


# -------------------------------------------------------------- elementwise

def relu(input: Tensor) -> Tensor:
    x = input.data
    y = np.maximum(x, 0)

    def backward_fn(g, needs):
        return (g * (x > 0),)

    return record("relu", y, (input,), backward_fn)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    y = a.data + b.data

    def backward_fn(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return record("add", y, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data

    def backward_fn(g, needs):
        return (_unbroadcast(g * bv, a.shape) if needs[0] else None,
                _unbroadcast(g * av, b.shape) if needs[1] else None)

    return record("mul", av * bv, (a, b), backward_fn)


def sum_all(input: Tensor) -> Tensor:
    shape = input.shape

    def backward_fn(g, needs):
        return (np.broadcast_to(g, shape).astype(DTYPE),)

    return record("sum", np.asarray(input.data.sum(dtype=np.float64), DTYPE), (input,), backward_fn)


def reshape(input: Tensor, shape) -> Tensor:
    old = input.shape

    def backward_fn(g, needs):
        return (g.reshape(old),)

    return record("reshape", input.data.reshape(shape), (input,), backward_fn)


def flatten(input: Tensor) -> Tensor:
    return reshape(input, (input.shape[0], -1))


# ------------------------------------------------------------------- pooling

def pool3d(input: Tensor, mode: str, kernel, stride, padding=0) -> Tensor:
    """Max or average pooling over (t, h, w) windows.

    Padding never wins a max and is excluded from the average's count.
    """
    _require_5d(input, "pool3d")
    kernel, stride, padding = triple(kernel), triple(stride), triple(padding)
    if mode not in ("max", "avg"):
        raise ConfigError(f"unknown pooling mode {mode!r}")
    for name, k, p in zip(_AXES, kernel, padding):
        if k < 1 or p >= k:
            raise ConfigError(f"pool window on axis {name} could be empty (kernel {k}, padding {p})")
    out = out_dims(input.shape[2:], kernel, stride, padding)
    x = input.data
    lead = (slice(None), slice(None))
    if mode == "max":
        xp = _pad_spatial(x, padding, value=-np.inf)
        win = sliding_window_view(xp, kernel, axis=(2, 3, 4))
        win = win[:, :, ::stride[0], ::stride[1], ::stride[2]][:, :, :out[0], :out[1], :out[2]]
        win = win.reshape(win.shape[:5] + (-1,))
        arg = win.argmax(axis=-1)
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

        def backward_fn(g, needs):
            dxp = np.zeros(xp.shape, DTYPE)
            for idx, off in enumerate(_kernel_offsets(kernel)):
                dxp[lead + _window_slices(off, stride, out)] += np.where(arg == idx, g, 0)
            return (_crop_spatial(dxp, padding),)
    else:
        xp = _pad_spatial(x, padding)
        ones = _pad_spatial(np.ones((1, 1) + x.shape[2:], DTYPE), padding)
        total = np.zeros(x.shape[:2] + out, DTYPE)
        count = np.zeros((1, 1) + out, DTYPE)
        for off in _kernel_offsets(kernel):
            sl = lead + _window_slices(off, stride, out)
            total += xp[sl]
            count += ones[sl]
        y = total / count

        def backward_fn(g, needs):
            gc = g / count
            dxp = np.zeros(xp.shape, DTYPE)
            for off in _kernel_offsets(kernel):
                dxp[lead + _window_slices(off, stride, out)] += gc
            return (_crop_spatial(dxp, padding),)

    return record(f"{mode}_pool3d", y, (input,), backward_fn)


def global_avg_pool(input: Tensor) -> Tensor:
    """Mean over all (t, h, w) positions; output shape (n, c, 1, 1, 1)."""
    _require_5d(input, "global_avg_pool")
    shape = input.shape
    count = shape[2] * shape[3] * shape[4]
    if count == 0:
        raise ShapeError("global_avg_pool needs at least one spatial position", axis="t")
    y = input.data.mean(axis=(2, 3, 4), keepdims=True, dtype=np.float64).astype(DTYPE)

    def backward_fn(g, needs):
        return (np.broadcast_to(g / DTYPE(count), shape).astype(DTYPE),)

    return record("global_avg_pool", y, (input,), backward_fn)


# ---------------------------------------------------------------- classifier

def linear(input: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map of an (n, f) feature matrix to (n, classes) scores."""
    if input.ndim != 2:
        raise ShapeError(f"linear expects an (n, f) matrix, got shape {input.shape}")
    if weight.ndim != 2 or weight.shape[1] != input.shape[1]:
        raise ShapeError(f"weight shape {weight.shape} does not match {input.shape[1]} features", axis="f")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs", axis="classes")
    x, w = input.data, weight.data
    y = x @ w.T + bias.data

    def backward_fn(g, needs):
        return (g @ w if needs[0] else None,
                g.T @ x if needs[1] else None,
                g.sum(axis=0) if needs[2] else None)

    return record("linear", y, (input, weight, bias), backward_fn)


def log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(scores: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(scores)."""
    if scores.ndim != 2:
        raise ShapeError(f"scores must be (n, classes), got shape {scores.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = scores.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} score rows", axis="n")
    if n == 0:
        raise ShapeError("empty batch", axis="n")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    s = scores.data.astype(np.float64)
    logp = log_softmax(s)
    loss = -logp[np.arange(n), labels].mean()

    def backward_fn(g, needs):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return ((d * (np.asarray(g).item() / n)).astype(DTYPE),)

    return record("softmax_cross_entropy", np.asarray(loss, DTYPE), (scores,), backward_fn)


# ------------------------------------------------------------------ channels

def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate along the channel axis, first argument's channels first."""
    if len(tensors) < 1:
        raise ValueError("concat_channels needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise ShapeError(f"rank mismatch: {t.shape} vs {ref}")
        for i, (a, b) in enumerate(zip(t.shape, ref)):
            if i != 1 and a != b:
                raise ShapeError(f"cannot concatenate {ref} with {t.shape}", axis=("n", "c", "t", "h", "w")[i])
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    y = np.concatenate([t.data for t in tensors], axis=1)

    def backward_fn(g, needs):
        return tuple(g[:, bounds[i]:bounds[i + 1]] if needs[i] else None
                     for i in range(len(tensors)))

    return record("concat_channels", y, tensors, backward_fn)


def slice_channels(input: Tensor, start: int, stop: int) -> Tensor:
    shape = input.shape

    def backward_fn(g, needs):
        d = np.zeros(shape, DTYPE)
        d[:, start:stop] = g
        return (d,)

    return record("slice_channels", input.data[:, start:stop], (input,), backward_fn)


def pad_channels(input: Tensor, out_channels: int) -> Tensor:
    """Append zero channels up to ``out_channels``."""
    c = input.shape[1]
    if out_channels < c:
        raise ShapeError(f"cannot zero-pad {c} channels down to {out_channels}", axis="c")
    if out_channels == c:
        return input
    widths = [(0, 0)] * input.ndim
    widths[1] = (0, out_channels - c)
    y = np.pad(input.data, widths)

    def backward_fn(g, needs):
        return (g[:, :c],)

    return record("pad_channels", y, (input,), backward_fn)


def subsample(input: Tensor, stride: Sequence[int]) -> Tensor:
    """Strided 1x1x1 average pooling, i.e. keep every stride-th position."""
    stride = triple(stride)
    if stride == (1, 1, 1):
        return input
    return pool3d(input, "avg", 1, stride, 0)
