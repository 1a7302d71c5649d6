"""Neural-network operators on top of the autograd tensor: convolutions
(grouped / depthwise / pointwise), batch normalization, pooling and linear
layers, plus a small parameter-owning Module system.

Convolution uses cross-correlation semantics (no kernel flip) and is
implemented as im2col + grouped matmul with a hand-written backward.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from . import tensor as T
from .tensor import Tensor


# -- initializers --


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# -- module system --


class Module:
    """Owns parameters/buffers and child modules; collects them by name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def update_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield f"{prefix}{name}", p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield f"{prefix}{name}", getattr(self, name)
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grads(self) -> None:
        T.zero_grads(self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


# -- convolution --


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(dcols: np.ndarray, x_shape, kh, kw, stride, padding, oh, ow) -> np.ndarray:
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += d6[:, :, i, j]
    if padding:
        return dxp[:, :, padding : padding + h, padding : padding + w]
    return dxp


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation over NCHW input.

    H' = floor((H + 2*pad - kh) / stride) + 1, same for W'. Differentiable
    w.r.t. input, weight and bias.
    """
    n, c, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if c != cg * groups:
        raise ShapeError(
            f"conv2d channel mismatch: input has {c} channels, "
            f"weight expects {cg * groups} (= {cg} x groups {groups})"
        )
    if cout % groups:
        raise ShapeError(f"conv2d: out_channels {cout} not divisible by groups {groups}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: non-positive output size {oh}x{ow} for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {padding}"
        )
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    l = oh * ow
    cols_g = cols.reshape(n, groups, cg * kh * kw, l)
    w_g = weight.data.reshape(groups, cout // groups, cg * kh * kw)
    out = np.matmul(w_g, cols_g).reshape(n, cout, oh, ow)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g_g = g.reshape(n, groups, cout // groups, l)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.matmul(w_g.transpose(0, 2, 1), g_g).reshape(n, c * kh * kw, l)
            gx = _col2im(dcols, x.shape, kh, kw, stride, padding, oh, ow)
        if weight.requires_grad:
            gw = np.matmul(g_g, cols_g.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return T._make(out, parents, bwd, "conv2d")


def avg_pool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Mean over window x window patches; floor semantics on the output size."""
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"avg_pool2d window {window} larger than input {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    acc = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for i in range(window):
        for j in range(window):
            acc += x.data[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    out = acc / (window * window)

    def bwd(g):
        share = g / (window * window)
        gx = np.zeros_like(x.data)
        for i in range(window):
            for j in range(window):
                gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += share
        return (gx,)

    return T._make(out, (x,), bwd, "avg_pool2d")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map: (N, D) @ (D, K) + (K,)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: inner dims differ ({x.shape[-1]} vs {weight.shape[0]})")
    out = T.matmul(x, weight)
    if bias is not None:
        out = T.add(out, bias)
    return out


# -- layers --


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 groups=1, bias=True, rng=None, dtype=np.float32):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ShapeError(
                f"conv channels ({in_channels}->{out_channels}) not divisible by groups {groups}"
            )
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kh, kw)
        self.stride = stride
        self.padding = padding
        self.groups = groups
        fan_in = (in_channels // groups) * kh * kw
        self.weight = Tensor(
            kaiming_uniform(rng, (out_channels, in_channels // groups, kh, kw), fan_in, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(
            kaiming_uniform(rng, (in_features, out_features), in_features, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    """Per-channel batch normalization over (N, H, W).

    Train mode uses biased batch statistics and updates running stats with
    unbiased variance at the configured momentum; eval mode applies the
    stored running statistics.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"batch_norm expects {self.channels} channels, got {c}")
        gamma = T.reshape(self.gamma, (1, c, 1, 1))
        beta = T.reshape(self.beta, (1, c, 1, 1))
        if self.training:
            count = n * h * w
            if count < 2:
                raise ShapeError("batch_norm train mode needs N*H*W >= 2 per channel")
            mu = T.mean_(x, axis=(0, 2, 3), keepdims=True)
            centered = T.sub(x, mu)
            var = T.mean_(T.mul(centered, centered), axis=(0, 2, 3), keepdims=True)
            inv = T.power(T.add(var, Tensor(np.full(var.shape, self.eps, dtype=x.dtype))), -0.5)
            xhat = T.mul(centered, inv)
            # Running stats live outside the graph; unbiased variance for eval.
            bm = mu.data.reshape(c)
            bv = var.data.reshape(c) * (count / (count - 1))
            m = self.momentum
            self.update_buffer("running_mean", ((1 - m) * self.running_mean + m * bm).astype(x.data.dtype))
            self.update_buffer("running_var", ((1 - m) * self.running_var + m * bv).astype(x.data.dtype))
        else:
            rm = Tensor(self.running_mean.reshape(1, c, 1, 1).astype(x.data.dtype))
            denom = Tensor(np.sqrt(self.running_var + self.eps).reshape(1, c, 1, 1).astype(x.data.dtype))
            xhat = T.div(T.sub(x, rm), denom)
        return T.add(T.mul(xhat, gamma), beta)


def batch_norm(x: Tensor, state: BatchNorm2d) -> Tensor:
    return state(x)


class GlobalAvgPool(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.mean_(x, axis=(2, 3))
