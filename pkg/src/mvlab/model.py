"""Hybrid convolution/attention pyramid classifier.

A four-stage hierarchical backbone: a four-conv stem reduces 4x, then each
later stage halves the spatial size and roughly doubles the width. Stages
stack two block kinds:

* ConvBlock: grouped-conv token mixer plus a locally connected feed-forward
  path, both residual.
* FusionBlock: splits channels into a pooled self-attention path (global,
  low-frequency) and a grouped-conv path (local, high-frequency), fuses them
  by concatenation and a shared feed-forward, all residual.

Normalization is BatchNorm and the activation is ReLU throughout, so every
learned unit is a conv/BN composition. The classifier head is BN, global
average pooling and a linear map.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import BatchNorm2d, Conv2d, Linear, Module, ModuleList, avg_pool2d
from .tensor import Tensor


# -- sequence/image relayout --


def seq2img(tokens: Tensor, h: int, w: int) -> Tensor:
    """(N, h*w, d) token sequence -> (N, d, h, w) feature map.

    Token i*w + j lands at spatial position (i, j); exact bijection with
    img2seq.
    """
    n, hw, d = tokens.shape
    if hw != h * w:
        raise ShapeError(f"seq2img: {hw} tokens do not factor into {h}x{w}")
    return T.reshape(T.transpose(tokens, (0, 2, 1)), (n, d, h, w))


def img2seq(x: Tensor) -> Tensor:
    """(N, d, h, w) feature map -> (N, h*w, d) token sequence."""
    n, d, h, w = x.shape
    return T.transpose(T.reshape(x, (n, d, h * w)), (0, 2, 1))


# -- building blocks --


class ConvBNRelu(Module):
    def __init__(self, cin, cout, stride, rng, dtype):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


class Projection(Module):
    """Pointwise channel projection with BN, optionally preceded by a 2x2
    stride-2 average pool (the stage patch embedding)."""

    def __init__(self, cin, cout, pool=False, rng=None, dtype=np.float32):
        super().__init__()
        self.pool = pool
        self.conv = Conv2d(cin, cout, 1, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x):
        if self.pool:
            x = avg_pool2d(x, 2, 2)
        return self.bn(self.conv(x))


class LocalFFN(Module):
    """Feed-forward over tokens with a depthwise 3x3 between the pointwise
    maps, so neighbouring tokens leak into each other."""

    def __init__(self, dim, hidden, rng, dtype):
        super().__init__()
        self.dim = dim
        self.pw1 = Conv2d(dim, hidden, 1, bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(hidden, dtype=dtype)
        self.dw = Conv2d(hidden, hidden, 3, padding=1, groups=hidden, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(hidden, dtype=dtype)
        self.pw2 = Conv2d(hidden, dim, 1, bias=True, rng=rng, dtype=dtype)

    def forward(self, x):
        if x.shape[1] != self.dim:
            raise ShapeError(f"feed-forward expects {self.dim} channels, got {x.shape[1]}")
        y = T.relu(self.bn1(self.pw1(x)))
        y = T.relu(self.bn2(self.dw(y)))
        return self.pw2(y)


class ConvAttention(Module):
    """Multi-head convolutional token mixer: a grouped 3x3 conv (one group
    per head) followed by a pointwise output projection. Before the output
    projection each head only sees its own channel slice."""

    def __init__(self, channels, head_dim, rng, dtype):
        super().__init__()
        if channels % head_dim:
            raise ShapeError(f"channels {channels} not divisible by head_dim {head_dim}")
        self.channels = channels
        self.heads = channels // head_dim
        self.group_conv = Conv2d(channels, channels, 3, padding=1, groups=self.heads,
                                 bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(channels, dtype=dtype)
        self.out_proj = Conv2d(channels, channels, 1, bias=True, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.out_proj(T.relu(self.bn(self.group_conv(x))))

    def pre_proj(self, x):
        """Per-head activations before the head-mixing output projection."""
        return T.relu(self.bn(self.group_conv(x)))


class PooledAttention(Module):
    """Multi-head self-attention whose keys/values come from an avg-pooled
    (stride s) copy of the feature map; queries see every token.

    Per head: softmax(Q K^T / sqrt(head_dim)) V with per-head pointwise
    Q/K/V projections; heads are concatenated and mixed by a pointwise
    output projection, then BN on the relayout.
    """

    def __init__(self, channels, head_dim, pool_stride, rng, dtype):
        super().__init__()
        if channels % head_dim:
            raise ShapeError(f"channels {channels} not divisible by head_dim {head_dim}")
        self.channels = channels
        self.head_dim = head_dim
        self.heads = channels // head_dim
        self.pool_stride = pool_stride
        def proj():
            w = Tensor(np.stack([
                _kaiming(rng, (head_dim, head_dim), head_dim, dtype) for _ in range(self.heads)
            ]), requires_grad=True)
            b = Tensor(np.zeros((self.heads, 1, head_dim), dtype=dtype), requires_grad=True)
            return w, b
        self.q_w, self.q_b = proj()
        self.k_w, self.k_b = proj()
        self.v_w, self.v_b = proj()
        self.out_proj = Conv2d(channels, channels, 1, bias=True, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(channels, dtype=dtype)

    def _heads(self, x):
        # (N, C, h, w) -> (N, heads, h*w, head_dim)
        n, c, h, w = x.shape
        tokens = img2seq(x)
        by_head = T.reshape(tokens, (n, h * w, self.heads, self.head_dim))
        return T.transpose(by_head, (0, 2, 1, 3))

    def attend(self, x):
        """Attention output before the final BN, as an NCHW map."""
        n, c, h, w = x.shape
        q_src = self._heads(x)
        kv_map = avg_pool2d(x, self.pool_stride, self.pool_stride) if self.pool_stride > 1 else x
        kv_src = self._heads(kv_map)
        q = T.add(T.matmul(q_src, self.q_w), self.q_b)
        k = T.add(T.matmul(kv_src, self.k_w), self.k_b)
        v = T.add(T.matmul(kv_src, self.v_w), self.v_b)
        scores = T.div(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                       Tensor(np.asarray(np.sqrt(self.head_dim), dtype=x.dtype)))
        mixed = T.matmul(T.softmax(scores, axis=-1), v)
        merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (n, h * w, c))
        return self.out_proj(seq2img(merged, h, w))

    def forward(self, x):
        return self.bn(self.attend(x))


def _kaiming(rng, shape, fan_in, dtype):
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ConvBlock(Module):
    """Residual pair: token mixing then feed-forward, each with a skip."""

    def __init__(self, channels, head_dim, ffn_hidden, rng, dtype):
        super().__init__()
        self.channels = channels
        self.mixer = ConvAttention(channels, head_dim, rng, dtype)
        self.ffn = LocalFFN(channels, ffn_hidden, rng, dtype)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"block expects {self.channels} channels, got {x.shape[1]}")
        y = T.add(self.mixer(x), x)
        return T.add(self.ffn(y), y)


class FusionBlock(Module):
    """Dual-path block mixing global (pooled attention) and local (grouped
    conv) features.

    Channel bookkeeping with output width C and split ratio r: the attention
    path runs at r*C channels, the conv path at (1-r)*C, and their
    concatenation restores C before the shared feed-forward.
    """

    def __init__(self, cin, cout, split_ratio, head_dim, pool_stride, ffn_hidden, rng, dtype):
        super().__init__()
        attn_ch = split_ratio * cout
        conv_ch = (1.0 - split_ratio) * cout
        if abs(attn_ch - round(attn_ch)) > 1e-9 or abs(conv_ch - round(conv_ch)) > 1e-9:
            raise ConfigError(
                f"split ratio {split_ratio} of {cout} channels gives non-integer "
                f"paths ({attn_ch}, {conv_ch})"
            )
        self.cin = cin
        self.cout = cout
        self.attn_ch = int(round(attn_ch))
        self.conv_ch = int(round(conv_ch))
        self.proj_in = Projection(cin, self.attn_ch, rng=rng, dtype=dtype)
        self.attn = PooledAttention(self.attn_ch, head_dim, pool_stride, rng, dtype)
        self.proj_mid = Projection(self.attn_ch, self.conv_ch, rng=rng, dtype=dtype)
        self.mixer = ConvAttention(self.conv_ch, head_dim, rng, dtype)
        self.ffn = LocalFFN(cout, ffn_hidden, rng, dtype)

    def forward(self, x, taps=None, prefix=""):
        a0 = self.proj_in(x)
        a = T.add(self.attn(a0), a0)
        if taps is not None:
            taps[f"{prefix}.attn"] = a
        b0 = self.proj_mid(a)
        b = T.add(self.mixer(b0), b0)
        cat = T.concat([a, b], axis=1)
        return T.add(self.ffn(cat), cat)


# -- configuration --


@dataclass
class StageSpec:
    """One pyramid stage: optional pooled patch embedding, then `repeat`
    rounds of conv blocks followed by at most one fusion block."""

    pool: bool
    conv_count: int
    conv_channels: int
    fusion_count: int          # 0 or 1
    fusion_channels: int       # 0 when fusion_count == 0
    repeat: int
    attn_pool_stride: int = 1

    @property
    def out_channels(self) -> int:
        return self.fusion_channels if self.fusion_count else self.conv_channels


@dataclass
class ModelConfig:
    variant: str
    stem_channels: tuple
    stem_strides: tuple
    stages: list
    num_classes: int
    input_size: int
    in_channels: int = 3
    head_dim: int = 32
    split_ratio: float = 0.75
    conv_ffn_ratio: float = 0.5
    fusion_ffn_ratio: float = 0.25
    dtype: str = "float32"

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def arch_dict(self) -> dict:
        d = asdict(self)
        d.pop("dtype")  # precision is a run property, not an architecture one
        return d


def config_digest(cfg: ModelConfig) -> bytes:
    canon = json.dumps(cfg.arch_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).digest()


_STANDARD_REPEATS = {"t": 2, "s": 4, "l": 6}


def standard_config(variant: str, num_classes: int = 8, input_size: Optional[int] = None,
                    dtype: str = "float32") -> ModelConfig:
    """The published stage layouts: variants t/s/l differ only in the
    stage-3 repeat count (2/4/6); `toy` divides all widths by 8 and runs at
    32x32 input with a single stage-3 repeat."""
    variant = variant.lower()
    if variant in _STANDARD_REPEATS:
        rep = _STANDARD_REPEATS[variant]
        return ModelConfig(
            variant=variant,
            stem_channels=(64, 32, 64, 64),
            stem_strides=(2, 1, 1, 2),
            stages=[
                StageSpec(False, 3, 96, 0, 0, 1),
                StageSpec(True, 3, 192, 1, 256, 1, attn_pool_stride=4),
                StageSpec(True, 4, 384, 1, 512, rep, attn_pool_stride=2),
                StageSpec(True, 2, 768, 1, 1024, 1, attn_pool_stride=1),
            ],
            num_classes=num_classes,
            input_size=224 if input_size is None else input_size,
            head_dim=32,
            dtype=dtype,
        )
    if variant == "toy":
        return ModelConfig(
            variant="toy",
            stem_channels=(8, 4, 8, 8),
            stem_strides=(2, 1, 1, 2),
            stages=[
                StageSpec(False, 3, 12, 0, 0, 1),
                StageSpec(True, 3, 24, 1, 32, 1, attn_pool_stride=4),
                StageSpec(True, 4, 48, 1, 64, 1, attn_pool_stride=2),
                StageSpec(True, 2, 96, 1, 128, 1, attn_pool_stride=1),
            ],
            num_classes=num_classes,
            input_size=32 if input_size is None else input_size,
            head_dim=4,
            dtype=dtype,
        )
    raise ConfigError(f"unknown variant {variant!r} (expected t, s, l or toy)")


# -- stages and the full network --


class Stage(Module):
    def __init__(self, spec: StageSpec, cin: int, cfg: ModelConfig, rng, dtype):
        super().__init__()
        self.spec = spec
        self.embed = Projection(cin, spec.conv_channels, pool=spec.pool, rng=rng, dtype=dtype)
        blocks: list[Module] = []
        for rep in range(spec.repeat):
            if rep > 0:
                blocks.append(Projection(spec.out_channels, spec.conv_channels, rng=rng, dtype=dtype))
            for _ in range(spec.conv_count):
                blocks.append(ConvBlock(
                    spec.conv_channels, cfg.head_dim,
                    _ffn_hidden(spec.conv_channels, cfg.conv_ffn_ratio), rng, dtype))
            if spec.fusion_count:
                blocks.append(FusionBlock(
                    spec.conv_channels, spec.fusion_channels, cfg.split_ratio,
                    cfg.head_dim, spec.attn_pool_stride,
                    _ffn_hidden(spec.fusion_channels, cfg.fusion_ffn_ratio), rng, dtype))
        self.blocks = ModuleList(blocks)

    @property
    def out_channels(self) -> int:
        return self.spec.out_channels

    def forward(self, x, taps=None, prefix=""):
        x = self.embed(x)
        for i, block in enumerate(self.blocks):
            if isinstance(block, FusionBlock):
                x = block(x, taps=taps, prefix=f"{prefix}.block{i}")
            else:
                x = block(x)
            if taps is not None:
                taps[f"{prefix}.block{i}"] = x
        return x


def _ffn_hidden(dim: int, ratio: float) -> int:
    hidden = dim * ratio
    if abs(hidden - round(hidden)) > 1e-9 or hidden < 1:
        raise ConfigError(f"feed-forward ratio {ratio} of {dim} channels is not a positive integer")
    return int(round(hidden))


class HybridNet(Module):
    """Stem -> 4 stages -> BN -> global average pool -> linear logits."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        dtype = cfg.np_dtype()
        self.cfg = cfg
        stem = []
        cin = cfg.in_channels
        for cout, stride in zip(cfg.stem_channels, cfg.stem_strides):
            stem.append(ConvBNRelu(cin, cout, stride, rng, dtype))
            cin = cout
        self.stem = ModuleList(stem)
        stages = []
        for spec in cfg.stages:
            stage = Stage(spec, cin, cfg, rng, dtype)
            stages.append(stage)
            cin = stage.out_channels
        self.stages = ModuleList(stages)
        self.head_norm = BatchNorm2d(cin, dtype=dtype)
        self.head = Linear(cin, cfg.num_classes, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, taps: Optional[dict] = None,
                feature_hook: Optional[Callable[[Tensor], Tensor]] = None,
                hook_stage: Optional[int] = None) -> Tensor:
        """Images (N, C, H, W) -> logits (N, num_classes).

        ``taps``, when given a dict, collects named intermediate activations.
        ``feature_hook`` is applied to the feature map right after stage
        ``hook_stage`` (1-based), the seam used by train-time augmentation.
        """
        for layer in self.stem:
            x = layer(x)
        if taps is not None:
            taps["stem"] = x
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x, taps=taps, prefix=f"stage{i}")
            if taps is not None:
                taps[f"stage{i}"] = x
            if feature_hook is not None and hook_stage == i:
                x = feature_hook(x)
        x = self.head_norm(x)
        pooled = T.mean_(x, axis=(2, 3))
        return self.head(pooled)

    def default_cam_layer(self) -> str:
        """Attention-path output inside the last fusion block."""
        last = len(self.stages)
        idx = len(self.stages[-1].blocks) - 1
        return f"stage{last}.block{idx}.attn"


def build_model(cfg: ModelConfig, seed: int) -> HybridNet:
    """Instantiate a network with seed-deterministic parameters."""
    rng = np.random.default_rng(seed)
    model = HybridNet(cfg, rng)
    names = [n for n, _ in model.named_parameters()]
    if len(names) != len(set(names)):
        raise ConfigError("duplicate parameter names in model")
    ids = [id(p) for _, p in model.named_parameters()]
    if len(ids) != len(set(ids)):
        raise ConfigError("duplicate parameter tensors in model")
    return model


def count_params(model: Module) -> int:
    """Total trainable scalar count (conv/linear weights+biases, BN gamma/beta)."""
    return sum(p.size for _, p in model.named_parameters())
