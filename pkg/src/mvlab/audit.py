"""Architectural accounting (parameters, multiply-accumulates) and
gradient-weighted class activation maps.

Cost units: one reported FLOP unit is one multiply-accumulate (MAC), so the
"G" totals match the convention of backbone-comparison tables where e.g. a
224x224 ResNet-18 is 1.8G. BN, ReLU and pooling count as zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import resize_bilinear
from .errors import ConfigError
from .model import (
    ConvAttention,
    ConvBlock,
    FusionBlock,
    HybridNet,
    LocalFFN,
    PooledAttention,
    Projection,
)
from .nn import Conv2d, Module
from .tensor import Tensor, backward


@dataclass
class AuditRow:
    name: str
    params: int
    macs: int


@dataclass
class AuditReport:
    rows: list = field(default_factory=list)
    total_params: int = 0
    total_macs: int = 0

    @property
    def total_gmacs(self) -> float:
        return self.total_macs / 1e9

    def add(self, name: str, params: int, macs: int) -> None:
        self.rows.append(AuditRow(name, params, macs))
        self.total_params += params
        self.total_macs += macs

    def as_text(self) -> str:
        width = max([len(r.name) for r in self.rows] + [10])
        lines = [f"{'layer':<{width}}  {'params':>12}  {'MACs':>14}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.params:>12,}  {r.macs:>14,}")
        lines.append(f"{'total':<{width}}  {self.total_params:>12,}  {self.total_macs:>14,}")
        return "\n".join(lines)

    def as_csv(self) -> str:
        lines = ["layer,params,macs"]
        lines += [f"{r.name},{r.params},{r.macs}" for r in self.rows]
        lines.append(f"total,{self.total_params},{self.total_macs}")
        return "\n".join(lines)


def _params_of(module: Module) -> int:
    return sum(p.size for _, p in module.named_parameters())


def _conv_macs(conv: Conv2d, h: int, w: int) -> tuple[int, int, int]:
    kh, kw = conv.kernel
    oh = (h + 2 * conv.padding - kh) // conv.stride + 1
    ow = (w + 2 * conv.padding - kw) // conv.stride + 1
    macs = conv.out_channels * oh * ow * (conv.in_channels // conv.groups) * kh * kw
    return macs, oh, ow


def _projection_macs(proj: Projection, h: int, w: int) -> tuple[int, int, int]:
    if proj.pool:
        h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
    macs, h, w = _conv_macs(proj.conv, h, w)
    return macs, h, w


def _conv_attention_macs(attn: ConvAttention, h: int, w: int) -> int:
    macs, _, _ = _conv_macs(attn.group_conv, h, w)
    macs2, _, _ = _conv_macs(attn.out_proj, h, w)
    return macs + macs2


def _ffn_macs(ffn: LocalFFN, h: int, w: int) -> int:
    total = 0
    for conv in (ffn.pw1, ffn.dw, ffn.pw2):
        m, _, _ = _conv_macs(conv, h, w)
        total += m
    return total


def _pooled_attention_macs(attn: PooledAttention, h: int, w: int) -> int:
    tokens = h * w
    if attn.pool_stride > 1:
        ph = (h - attn.pool_stride) // attn.pool_stride + 1
        pw = (w - attn.pool_stride) // attn.pool_stride + 1
    else:
        ph, pw = h, w
    pooled = ph * pw
    d = attn.head_dim
    c = attn.channels
    macs = tokens * c * d            # Q projections (per head d x d)
    macs += 2 * pooled * c * d       # K and V projections on the pooled map
    macs += attn.heads * tokens * pooled * d   # Q K^T
    macs += attn.heads * tokens * pooled * d   # attention @ V
    out_macs, _, _ = _conv_macs(attn.out_proj, h, w)
    return macs + out_macs


def _block_macs(block: Module, h: int, w: int) -> int:
    if isinstance(block, ConvBlock):
        return _conv_attention_macs(block.mixer, h, w) + _ffn_macs(block.ffn, h, w)
    if isinstance(block, FusionBlock):
        total, _, _ = _projection_macs(block.proj_in, h, w)
        total += _pooled_attention_macs(block.attn, h, w)
        mid, _, _ = _projection_macs(block.proj_mid, h, w)
        total += mid
        total += _conv_attention_macs(block.mixer, h, w)
        total += _ffn_macs(block.ffn, h, w)
        return total
    if isinstance(block, Projection):
        total, _, _ = _projection_macs(block, h, w)
        return total
    raise ConfigError(f"unknown block type {type(block).__name__}")


def count_flops(model: HybridNet, input_size: int) -> AuditReport:
    """Analytic per-layer MAC/parameter table at batch size 1. Pure function
    of the architecture and input size; no forward pass runs."""
    report = AuditReport()
    h = w = input_size
    for i, layer in enumerate(model.stem):
        macs, h, w = _conv_macs(layer.conv, h, w)
        report.add(f"stem.{i}", _params_of(layer), macs)
    for si, stage in enumerate(model.stages, start=1):
        macs, h, w = _projection_macs(stage.embed, h, w)
        report.add(f"stage{si}.embed", _params_of(stage.embed), macs)
        for bi, block in enumerate(stage.blocks):
            report.add(f"stage{si}.block{bi}", _params_of(block), _block_macs(block, h, w))
    head_macs = model.head.in_features * model.head.out_features
    report.add("head", _params_of(model.head_norm) + _params_of(model.head), head_macs)
    return report


# -- saliency --


def grad_cam(model: HybridNet, image, target_class: int, layer: str = None) -> np.ndarray:
    """Gradient-weighted activation heatmap in [0, 1] at the model input size.

    Channel weights are the spatial means of d(logit_target)/d(activation)
    at the selected tap (default: the attention-path output of the last
    fusion block); the map is relu(sum_c w_c * A_c), min-max normalized and
    bilinearly upsampled. Raw-logit formulation, so adding a constant to all
    logits changes nothing. A zero-gradient (constant) activation yields an
    all-zero map rather than NaN.
    """
    layer = layer or model.default_cam_layer()
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim == 3:
        data = data[None]
    x = Tensor(data, requires_grad=True)  # guarantees the tap joins a graph
    was_training = model.training
    model.eval()
    try:
        taps: dict = {}
        logits = model(x, taps=taps)
        if layer not in taps:
            raise ConfigError(f"layer {layer!r} not found; available: {sorted(taps)}")
        if not (0 <= target_class < logits.shape[1]):
            raise ConfigError(f"target class {target_class} out of range")
        onehot = np.zeros(logits.shape, dtype=logits.dtype)
        onehot[0, target_class] = 1
        scalar = T.sum_(T.mul(logits, Tensor(onehot)))
        model.zero_grads()
        backward(scalar)
    finally:
        model.train(was_training)
    activation = taps[layer]
    grad = activation.grad
    if grad is None:
        grad = np.zeros_like(activation.data)
    weights = grad.mean(axis=(2, 3), keepdims=True)
    heat = np.maximum((weights * activation.data).sum(axis=1)[0], 0.0)
    span = heat.max() - heat.min()
    size = x.shape[-1]
    if span <= 0:
        return np.zeros((x.shape[-2], size), dtype=np.float64)
    heat = (heat - heat.min()) / span
    heat = resize_bilinear(heat.astype(np.float64), x.shape[-2], size)
    return np.clip(heat, 0.0, 1.0)


def write_pgm(path, heat: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) of a [0, 1] heatmap."""
    arr = np.clip(np.asarray(heat), 0.0, 1.0)
    u8 = np.round(arr * 255).astype(np.uint8)
    h, w = u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(u8.tobytes())
