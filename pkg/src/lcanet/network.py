"""Coarse-to-fine encoder-decoder.

Encoder stage ``i`` (1..5) is two 3x3 conv+ReLU layers followed by 2x2 max
pooling, except stage 5 which is not pooled: a 64x64 input gives stage sizes
32, 16, 8, 4, 4. The global refinement block (GRB) and a 1x1 head on top of
stage 5 give the coarse map.

Decoder levels are numbered like the conv blocks of a VGG backbone, where
block ``s`` runs at stride ``2**(s-1)``: level 5 fuses the top feature with
encoder stage 4 (same size), level 4 with stage 3, level 3 with stage 2. Each
level is a side refinement block (SRB) optionally followed by an attention
block; the level-3 output (stride 4) is turned into the refined map and
upsampled 4x.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .baselines import BaselineConfig, LocalAffinityBlock, NonLocalBlock, SEBlock
from .bbox import BBox
from .local_context import LcbConfig, LocalContextBlock
from .nn import Conv2d, Module, zeros
from .tensor import Tensor

HEADS = ("coarse_only", "coarse_and_refine")
ATTENTION_KINDS = ("none", "se", "nonlocal", "local_affinity", "acf")
DECODER_LEVELS = (5, 4, 3)


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (64, 64)
    stage_channels: tuple[int, ...] = (16, 32, 64, 64, 64)
    decoder_channels: int = 32
    use_grb: bool = True
    heads: str = "coarse_and_refine"
    attention_kind: str = "acf"
    lcb: LcbConfig = field(default_factory=LcbConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def validate(self) -> None:
        if len(self.stage_channels) != 5 or min(self.stage_channels) < 1:
            raise ValueError(f"model.stage_channels needs 5 positive widths, got {self.stage_channels}")
        h, w = self.input_size
        if h % 32 or w % 32 or h <= 0 or w <= 0:
            raise ValueError(f"model.input_size must be positive multiples of 32, got {self.input_size}")
        if self.decoder_channels < 1:
            raise ValueError("model.decoder_channels must be positive")
        if self.heads not in HEADS:
            raise ValueError(f"model.heads must be one of {HEADS}, got {self.heads!r}")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ValueError(
                f"model.attention_kind must be one of {ATTENTION_KINDS}, got {self.attention_kind!r}"
            )
        bad = [s for s in self.lcb.stages if s not in DECODER_LEVELS]
        if bad:
            raise ValueError(f"model.lcb.stages must be drawn from {DECODER_LEVELS}, got {bad}")
        self.lcb.validate()
        self.baseline.validate()


@dataclass
class ForwardOutputs:
    coarse: Tensor
    refined: Tensor | None
    stage_features: list[Tensor]
    # (decoder level, scale) -> N x 1 x h x w attention map, for acf blocks
    attention: dict[tuple[int, float], np.ndarray] = field(default_factory=dict)
    boxes: dict[int, list[BBox]] = field(default_factory=dict)

    @property
    def prediction(self) -> Tensor:
        """The map used for evaluation: refined if the decoder ran, else coarse."""
        return self.refined if self.refined is not None else self.coarse


class EncoderStage(Module):
    def __init__(self, in_ch: int, out_ch: int, pool: bool):
        self.conv1 = Conv2d(in_ch, out_ch, 3)
        self.conv2 = Conv2d(out_ch, out_ch, 3)
        self.pool = pool

    def forward(self, x: Tensor) -> Tensor:
        x = ops.relu(self.conv2(ops.relu(self.conv1(x))))
        return ops.max_pool2d(x) if self.pool else x


class Encoder(Module):
    def __init__(self, stage_channels, in_ch: int = 3):
        chans = [in_ch, *stage_channels]
        self.stages = [EncoderStage(chans[i], chans[i + 1], pool=i < 4) for i in range(5)]

    def forward(self, image: Tensor) -> list[Tensor]:
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ValueError(f"input spatial size must be divisible by 32, got {h}x{w}")
        feats, x = [], image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class GlobalRefinementBlock(Module):
    """Two 1x1 convs reshape the feature; a pooled 1x1 conv gates it."""

    def __init__(self, channels: int):
        self.conv1 = Conv2d(channels, channels, k=1)
        self.conv2 = Conv2d(channels, channels, k=1)
        self.gate = Conv2d(channels, channels, k=1)

    def forward(self, f: Tensor) -> Tensor:
        reshaped = self.conv2(ops.relu(self.conv1(f)))
        gate = ops.sigmoid(self.gate(ops.global_avg_pool(f)))
        return ops.mul(reshaped, gate)


class CoarseHead(Module):
    def __init__(self, channels: int):
        self.conv = Conv2d(channels, 1, k=1)

    def forward(self, x: Tensor, size: tuple[int, int]) -> Tensor:
        return ops.bilinear_resize(ops.sigmoid(self.conv(x)), *size)


class SideRefinementBlock(Module):
    """``x = up(deep) + proj(lateral)``; output ``x + conv(relu(conv(x)))``.

    The second residual conv starts at zero, so the block initially returns
    ``x``. ``deep`` is projected too when its width differs from the output.
    """

    def __init__(self, deep_ch: int, lateral_ch: int, out_ch: int):
        self.lateral_proj = Conv2d(lateral_ch, out_ch, k=1)
        self.deep_proj = Conv2d(deep_ch, out_ch, k=1) if deep_ch != out_ch else None
        self.conv1 = Conv2d(out_ch, out_ch, 3)
        self.conv2 = Conv2d(out_ch, out_ch, 3, init=zeros)

    def fuse(self, deep: Tensor, lateral: Tensor) -> Tensor:
        dh, dw = deep.shape[2:]
        lh, lw = lateral.shape[2:]
        if (lh, lw) not in ((dh, dw), (2 * dh, 2 * dw)):
            raise ValueError(
                f"lateral {lh}x{lw} must equal or double the deep feature {dh}x{dw}"
            )
        if self.deep_proj is not None:
            deep = self.deep_proj(deep)
        return ops.add(ops.bilinear_resize(deep, lh, lw), self.lateral_proj(lateral))

    def forward(self, deep: Tensor, lateral: Tensor) -> Tensor:
        x = self.fuse(deep, lateral)
        return ops.add(x, self.conv2(ops.relu(self.conv1(x))))


def make_attention(cfg: ModelConfig, channels: int) -> Module | None:
    kind = cfg.attention_kind
    if kind == "none":
        return None
    if kind == "acf":
        return LocalContextBlock(channels, cfg.lcb)
    if kind == "se":
        return SEBlock(channels, cfg.baseline.reduction)
    if kind == "nonlocal":
        return NonLocalBlock(channels, cfg.baseline.embed_channels)
    if kind == "local_affinity":
        return LocalAffinityBlock(channels, cfg.lcb)
    raise ValueError(f"unknown attention kind {kind!r}")


class Decoder(Module):
    def __init__(self, cfg: ModelConfig):
        d = cfg.decoder_channels
        ch = cfg.stage_channels
        self.srb = {
            5: SideRefinementBlock(ch[4], ch[3], d),
            4: SideRefinementBlock(d, ch[2], d),
            3: SideRefinementBlock(d, ch[1], d),
        }
        self.attention = {}
        for level in DECODER_LEVELS:
            if level in cfg.lcb.stages:
                block = make_attention(cfg, d)
                if block is not None:
                    self.attention[level] = block
        self.head = Conv2d(d, 1, k=1)

    def forward(self, feats: list[Tensor], top: Tensor, coarse: Tensor,
                size: tuple[int, int], boxes: dict | None = None, record: ForwardOutputs | None = None):
        x = top
        for level in DECODER_LEVELS:
            x = self.srb[level](x, feats[level - 2])
            block = self.attention.get(level)
            if block is not None:
                x = block(x, coarse, None if boxes is None else boxes.get(level))
            if record is None:
                continue
            record.stage_features.append(x)
            if isinstance(block, (LocalContextBlock, LocalAffinityBlock)):
                record.boxes[level] = block.last_boxes
            if isinstance(block, LocalContextBlock):
                for s, m in block.last_attention.items():
                    record.attention[(level, s)] = m
        return ops.bilinear_resize(ops.sigmoid(self.head(x)), *size)


class LCANet(Module):
    """Encoder -> (GRB) -> coarse head -> decoder with attention -> refined map."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg.stage_channels)
        self.grb = GlobalRefinementBlock(cfg.stage_channels[4]) if cfg.use_grb else None
        self.coarse_head = CoarseHead(cfg.stage_channels[4])
        self.decoder = Decoder(cfg) if cfg.heads == "coarse_and_refine" else None
        self.assign_names()

    def forward(self, image: Tensor, boxes: dict[int, list[BBox]] | None = None) -> ForwardOutputs:
        """Run the whole network once.

        ``boxes`` optionally fixes the per-level local boxes instead of deriving
        them from the coarse map (used to hold them constant in gradient checks).
        """
        size = tuple(image.shape[2:])
        feats = self.encoder(image)
        top = self.grb(feats[4]) if self.grb is not None else feats[4]
        coarse = self.coarse_head(top, size)
        out = ForwardOutputs(coarse=coarse, refined=None, stage_features=list(feats))
        if self.decoder is not None:
            out.refined = self.decoder(feats, top, coarse, size, boxes, record=out)
        return out


def encoder_parameter_count(stage_channels, in_ch: int = 3, k: int = 3) -> int:
    """Closed form sum of k^2 * C_in * C_out + C_out over the ten encoder convs."""
    total, prev = 0, in_ch
    for c in stage_channels:
        total += k * k * prev * c + c + k * k * c * c + c
        prev = c
    return total
