"""Correlation-filter attention and local coordinate planes.

A box around the (binarized) coarse prediction selects a patch of the feature
map. The patch is resampled to an odd ``k x k`` window, L2-normalized, and
slid over the whole feature map as a correlation kernel. The sigmoid of that
correlation gates the feature (the "ACF" output). Two coordinate planes
encoding the distance to the box center complete the local context block.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .bbox import BBox, BoxOutOfImage
from .nn import Conv2d, Module
from .tensor import Tensor, no_grad

__all__ = [
    "BBox", "BoxOutOfImage", "LocalKernel", "LcbConfig", "binarize_bbox", "expand_bbox",
    "extract_local_kernel", "correlation_map", "acf_attention", "acf_apply", "lcc_planes",
    "LocalContextBlock",
]


@dataclass
class LocalKernel:
    """A ``C x k x k`` correlation kernel cut from a feature map."""

    weights: Tensor
    source_scale: float
    norm: float

    def __post_init__(self):
        if self.weights.ndim != 3 or self.weights.shape[1] != self.weights.shape[2]:
            raise ValueError(f"kernel weights must be C x k x k, got {self.weights.shape}")
        if self.weights.shape[1] % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.weights.shape[1]}")

    @property
    def channels(self) -> int:
        return self.weights.shape[0]

    @property
    def size(self) -> int:
        return self.weights.shape[1]


@dataclass
class LcbConfig:
    kernel_size: int = 5
    scales: tuple[float, ...] = (0.1, 0.3, 0.5)
    use_lcc: bool = True
    # decoder levels that get the block (see lcanet.network.Decoder)
    stages: tuple[int, ...] = (4, 3)
    threshold: float = 0.5

    def validate(self) -> None:
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"lcb.kernel_size must be a positive odd integer, got {self.kernel_size}")
        if not self.scales:
            raise ValueError("lcb.scales must not be empty")
        if any(s < 0 for s in self.scales):
            raise ValueError(f"lcb.scales must be non-negative, got {self.scales}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"lcb.threshold must lie in (0, 1), got {self.threshold}")


def binarize_bbox(pred, threshold: float = 0.5) -> list[BBox]:
    """Per batch item, the tightest box around pixels with ``pred >= threshold``.

    Items with no such pixel get the full-image box.
    """
    data = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    if data.ndim != 4 or data.shape[1] != 1:
        raise ValueError(f"binarize_bbox expects an N x 1 x H x W map, got {data.shape}")
    _, _, h, w = data.shape
    boxes = []
    for item in data[:, 0]:
        rows = np.flatnonzero((item >= threshold).any(axis=1))
        if rows.size == 0:
            boxes.append(BBox.full(h, w))
            continue
        cols = np.flatnonzero((item >= threshold).any(axis=0))
        boxes.append(BBox(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])))
    return boxes


def expand_bbox(box: BBox, ratio: float, bounds: tuple[int, int]) -> BBox:
    """Grow each side by ``ratio * side / 2`` at both ends, then clamp to ``bounds=(H, W)``.

    The growth is rounded half-up to whole pixels.
    """
    if ratio < 0:
        raise ValueError(f"expansion ratio must be >= 0, got {ratio}")
    gx = int(math.floor(ratio * box.width / 2.0 + 0.5))
    gy = int(math.floor(ratio * box.height / 2.0 + 0.5))
    grown = BBox(box.x_min - gx, box.y_min - gy, box.x_max + gx, box.y_max + gy)
    return grown.clamp(*bounds)


def extract_local_kernel(feature: Tensor, box: BBox, ratio: float, k: int) -> LocalKernel:
    """Crop the expanded box from a ``1 x C x H x W`` feature, resample to ``k x k``, L2-normalize."""
    if feature.ndim != 4 or feature.shape[0] != 1:
        raise ValueError(f"extract_local_kernel expects a 1 x C x H x W feature, got {feature.shape}")
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    c, h, w = feature.shape[1:]
    crop = ops.crop_resize(feature, expand_bbox(box, ratio, (h, w)), k, k)
    crop = ops.reshape(crop, (c, k, k))
    norm = float(np.sqrt(np.sum(crop.data.astype(np.float64) ** 2)))
    if norm == 0.0:
        return LocalKernel(Tensor(np.zeros((c, k, k))), ratio, 0.0)
    length = ops.sqrt(ops.sum(ops.mul(crop, crop)))
    return LocalKernel(ops.div(crop, length), ratio, norm)


def correlation_map(feature: Tensor, kernel: LocalKernel) -> Tensor:
    """Sliding dot product of the kernel with the feature, summed over channels.

    Zero padding keeps the output at the feature's spatial size.
    """
    if feature.ndim != 4:
        raise ValueError(f"correlation_map expects NCHW input, got {feature.shape}")
    if kernel.channels != feature.shape[1]:
        raise ValueError(
            f"kernel has {kernel.channels} channels but the feature has {feature.shape[1]}"
        )
    k = kernel.size
    weight = ops.reshape(kernel.weights, (1, kernel.channels, k, k))
    return ops.conv2d(feature, weight, None, 1, k // 2)


def acf_attention(feature: Tensor, kernel: LocalKernel) -> Tensor:
    """sigmoid(correlation_map): an N x 1 x H x W map in (0, 1)."""
    return ops.sigmoid(correlation_map(feature, kernel))


def acf_apply(feature: Tensor, kernel: LocalKernel) -> Tensor:
    """Gate every channel of ``feature`` by the correlation attention map."""
    return ops.mul(feature, acf_attention(feature, kernel))


def lcc_planes(center: tuple[float, float], height: int, width: int) -> Tensor:
    """Two ``1 x 2 x H x W`` planes: ``1 - |r - r_c| / H`` and ``1 - |c - c_c| / W``.

    ``center`` is ``(row, col)``; the first plane varies along rows, the second
    along columns, and both equal 1 on the center row/column.
    """
    r_c, c_c = center
    if not (0 <= r_c <= height - 1 and 0 <= c_c <= width - 1):
        raise ValueError(f"center {center} lies outside a {height}x{width} image")
    rows = 1.0 - np.abs(np.arange(height) - r_c) / height
    cols = 1.0 - np.abs(np.arange(width) - c_c) / width
    planes = np.stack([np.repeat(rows[:, None], width, axis=1), np.repeat(cols[None, :], height, axis=0)])
    return Tensor(planes[None])


def _passthrough(offset: int):
    def init(rng, shape):
        w = np.zeros(shape)
        for c in range(shape[0]):
            w[c, offset + c, 0, 0] = 1.0
        return w

    return init


class LocalContextBlock(Module):
    """Multi-scale correlation attention plus coordinate planes, fused by a 1x1 conv.

    For each scale the gated feature is computed; those, the two coordinate
    planes (if enabled) and the raw feature are concatenated in that order.
    The fuse conv starts as a selector of the raw-feature slice, so a freshly
    initialized block is an exact identity.
    """

    def __init__(self, channels: int, cfg: LcbConfig):
        cfg.validate()
        self.cfg = cfg
        self.channels = channels
        n_in = channels * len(cfg.scales) + (2 if cfg.use_lcc else 0) + channels
        self.fuse = Conv2d(n_in, channels, k=1, init=_passthrough(n_in - channels))
        self.last_attention: dict[float, np.ndarray] = {}
        self.last_boxes: list[BBox] = []

    def boxes_for(self, feature: Tensor, coarse_pred: Tensor) -> list[BBox]:
        h, w = feature.shape[2:]
        with no_grad():
            small = ops.bilinear_resize(Tensor(coarse_pred.data), h, w)
        return binarize_bbox(small, self.cfg.threshold)

    def forward(self, feature: Tensor, coarse_pred: Tensor, boxes: list[BBox] | None = None) -> Tensor:
        n, c, h, w = feature.shape
        if c != self.channels:
            raise ValueError(f"block built for {self.channels} channels, got {c}")
        if boxes is None:
            boxes = self.boxes_for(feature, coarse_pred)
        self.last_boxes = list(boxes)
        attention = {s: [] for s in self.cfg.scales}
        items = []
        for i in range(n):
            f_i = feature[i:i + 1]
            parts = []
            for s in self.cfg.scales:
                kernel = extract_local_kernel(f_i, boxes[i], s, self.cfg.kernel_size)
                att = acf_attention(f_i, kernel)
                attention[s].append(att.data)
                parts.append(ops.mul(f_i, att))
            if self.cfg.use_lcc:
                x_t, y_t = boxes[i].center
                parts.append(lcc_planes((y_t, x_t), h, w))
            parts.append(f_i)
            items.append(ops.concat_channels(parts))
        self.last_attention = {s: np.concatenate(v) for s, v in attention.items()}
        stacked = items[0] if n == 1 else ops.concat(items, axis=0)
        return self.fuse(stacked)
