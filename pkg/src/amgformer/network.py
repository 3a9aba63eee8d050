"""Four-branch segmentation network.

Each modality runs through its own CNN encoder (two 3x3x3 conv blocks per
scale, average-pool downsampling). The coarsest features pass through the
sparse-attention bottleneck, then a shared decoder walks back up: at every
scale the four skip features are quality-compensated, fused into one map,
added to the upsampled path, and tapped for per-scale logits. Lightweight
per-modality decoders provide extra supervision during training only.

Ablation toggles swap each mechanism for its neutral counterpart (identity
bottleneck + mean fusion, mean skip fusion, pass-through skips) without
changing any output shape. Initialization draws come from per-component
child seeds, so flipping a toggle never shifts another component's init.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .errors import ConfigError, ContractError, ShapeError
from .mgao import DEFAULT_RATIOS, MgaoBottleneck, validate_ratios
from .mqae import MqaeScale
from .nn import (BatchNorm, Conv1, ConvBnRelu, Module, ModuleList,
                 finalize_param_names)
from .qib import QibScale
from .tape import Tensor

NUM_MODALITIES = 4


@dataclass
class NetConfig:
    scales: int = 3
    base_channels: int = 8
    num_classes: int = 4
    input_size: int = 32
    use_qib: bool = True
    use_mgao: bool = True
    use_mqae: bool = True
    mask_quality: bool = True
    heads: int = 4
    ratios: tuple = DEFAULT_RATIOS

    def __post_init__(self):
        if self.scales < 2:
            raise ConfigError(f"scales must be >= 2, got {self.scales}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        stride = 2 ** (self.scales - 1)
        if self.input_size % stride != 0:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by 2^(scales-1) = {stride}")
        if self.use_mgao:
            validate_ratios(self.ratios)
            if self.channels(self.scales) % self.heads != 0:
                raise ConfigError(
                    f"bottleneck channels {self.channels(self.scales)} not divisible "
                    f"by heads {self.heads}")

    def channels(self, i: int) -> int:
        """Channel width at 1-based scale i."""
        return self.base_channels * (2 ** (i - 1))


@dataclass
class NetOutput:
    main_logits: Tensor
    scale_logits: list                       # finest first; [0] is main_logits
    aux_logits: Optional[list] = None        # 4 per-modality maps, training only
    quality: Optional[list] = None           # 4 per-batch scores, finest scale
    boundary_logits: Optional[list] = None   # 4 maps (B,1,D,H,W), training only
    semantic_logits: Optional[list] = None   # 4 logits (B,3), training only


def mean_fuse(xs: Sequence[Tensor]) -> Tensor:
    s = ops.add(ops.add(xs[0], xs[1]), ops.add(xs[2], xs[3]))
    return ops.scale(s, 1.0 / len(xs))


class EncoderStage(Module):
    def __init__(self, cin: int, cout: int, rng, dtype):
        super().__init__()
        self.a = ConvBnRelu(cin, cout, rng, dtype)
        self.b = ConvBnRelu(cout, cout, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.b(self.a(x))


class Encoder(Module):
    """Single-modality feature pyramid over S scales."""

    def __init__(self, cfg: NetConfig, rng, dtype):
        super().__init__()
        self.scales = cfg.scales
        stages = []
        cin = 1
        for i in range(1, cfg.scales + 1):
            stages.append(EncoderStage(cin, cfg.channels(i), rng, dtype))
            cin = cfg.channels(i)
        self.stages = ModuleList(stages)

    def forward(self, x: Tensor) -> list:
        feats = []
        cur = x
        for i, stage in enumerate(self.stages):
            cur = stage(cur)
            feats.append(cur)
            if i < self.scales - 1:
                cur = ops.avg_pool2(cur)
        return feats


class AuxDecoder(Module):
    """Per-modality decoder: pointwise reduction after each 2x upsample,
    skips added, logits at full resolution."""

    def __init__(self, cfg: NetConfig, rng, dtype):
        super().__init__()
        self.scales = cfg.scales
        reduces, bns = [], []
        for i in range(cfg.scales - 1, 0, -1):
            reduces.append(Conv1(cfg.channels(i + 1), cfg.channels(i), rng, dtype))
            bns.append(BatchNorm(cfg.channels(i), dtype))
        self.reduces = ModuleList(reduces)
        self.bns = ModuleList(bns)
        self.head = Conv1(cfg.channels(1), cfg.num_classes, rng, dtype)

    def forward(self, bottom: Tensor, skips: Sequence[Tensor]) -> Tensor:
        cur = bottom
        for j, i in enumerate(range(self.scales - 1, 0, -1)):
            cur = ops.upsample_nearest2(cur)
            cur = ops.relu(self.bns[j](self.reduces[j](cur)))
            cur = ops.add(cur, skips[i - 1])
        return self.head(cur)


class AmgNet(Module):
    """Full network; see module docstring for the data flow."""

    def __init__(self, cfg: NetConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        # fixed spawn slots per component: ablation toggles must not shift
        # the init draws of unrelated components
        kids = np.random.SeedSequence(seed).spawn(9)
        rngs = [np.random.default_rng(k) for k in kids]

        self.encoders = ModuleList([Encoder(cfg, rngs[m], dtype) for m in range(4)])

        c_bot = cfg.channels(cfg.scales)
        self.bottleneck = None
        if cfg.use_mgao:
            self.bottleneck = MgaoBottleneck(c_bot, rngs[4], dtype,
                                             heads=cfg.heads, ratios=cfg.ratios)

        ups, heads = [], []
        for i in range(cfg.scales - 1, 0, -1):
            ups.append(ConvBnRelu(cfg.channels(i + 1), cfg.channels(i), rngs[5], dtype))
        for i in range(1, cfg.scales + 1):
            heads.append(Conv1(cfg.channels(i), cfg.num_classes, rngs[5], dtype))
        self.up_convs = ModuleList(ups)           # coarse-to-fine walk order
        self.logit_heads = ModuleList(heads)      # indexed by scale-1

        self.mqae_scales = None
        if cfg.use_mqae:
            self.mqae_scales = ModuleList(
                [MqaeScale(cfg.channels(i), rngs[6], dtype, cfg.mask_quality)
                 for i in range(1, cfg.scales)])   # indexed by scale-1
        self.qib_scales = None
        if cfg.use_qib:
            self.qib_scales = ModuleList(
                [QibScale(cfg.channels(i), rngs[7], dtype)
                 for i in range(1, cfg.scales)])

        self.aux_decoders = ModuleList([AuxDecoder(cfg, rngs[8], dtype)
                                        for _ in range(4)])
        finalize_param_names(self)

    def split_modalities(self, x: Tensor) -> list:
        if x.ndim != 5 or x.data.shape[1] != NUM_MODALITIES:
            raise ShapeError(f"expected (B,4,D,H,W) volumes, got {x.data.shape}")
        return ops.split_channels(x, (1,) * NUM_MODALITIES)

    def encode(self, xs: Sequence[Tensor]) -> list:
        stride = 2 ** (self.cfg.scales - 1)
        d, h, w = xs[0].data.shape[2:]
        if d % stride or h % stride or w % stride:
            raise ConfigError(
                f"spatial size {(d, h, w)} not divisible by 2^(scales-1) = {stride}")
        return [self.encoders[m](xs[m]) for m in range(4)]

    def bottleneck_fuse(self, bottom: Sequence[Tensor]):
        """-> (4 refined per-modality maps, one fused map)."""
        if self.cfg.use_mgao:
            return self.bottleneck(bottom)
        return list(bottom), mean_fuse(bottom)

    def decode(self, pyramids: Sequence[list], fused: Tensor,
               mask: Sequence[bool]):
        cfg = self.cfg
        cur = fused
        coarse_first = [self.logit_heads[cfg.scales - 1](cur)]
        quality = None
        boundary = semantic = None
        for j, i in enumerate(range(cfg.scales - 1, 0, -1)):
            cur = self.up_convs[j](ops.upsample_nearest2(cur))
            skips = [pyramids[m][i - 1] for m in range(4)]
            if cfg.use_mqae:
                skips, qs = self.mqae_scales[i - 1](skips, mask)
                if i == 1:
                    quality = qs
                    if self.training:
                        pairs = [self.mqae_scales[0].aux_heads(s) for s in skips]
                        boundary = [p[0] for p in pairs]
                        semantic = [p[1] for p in pairs]
            if cfg.use_qib:
                fused_skip, _ = self.qib_scales[i - 1](skips, mask)
            else:
                fused_skip = mean_fuse(skips)
            cur = ops.add(cur, fused_skip)
            coarse_first.append(self.logit_heads[i - 1](cur))
        scale_logits = coarse_first[::-1]
        return NetOutput(main_logits=scale_logits[0], scale_logits=scale_logits,
                         quality=quality, boundary_logits=boundary,
                         semantic_logits=semantic)

    def aux_decode(self, refined: Sequence[Tensor],
                   pyramids: Sequence[list]) -> list:
        if not self.training:
            raise ContractError("auxiliary decoders are training-only")
        return [self.aux_decoders[m](refined[m], pyramids[m]) for m in range(4)]

    def forward(self, x: Tensor, mask: Sequence[bool] = (True,) * 4) -> NetOutput:
        if len(mask) != NUM_MODALITIES:
            raise ShapeError(f"mask must have 4 entries, got {len(mask)}")
        xs = self.split_modalities(x)
        pyramids = self.encode(xs)
        refined, fused = self.bottleneck_fuse([p[-1] for p in pyramids])
        out = self.decode(pyramids, fused, mask)
        if self.training:
            out.aux_logits = self.aux_decode(refined, pyramids)
        return out
