"""Comparison attention blocks: squeeze-excitation, non-local and local affinity.

All three share the call signature of :class:`LocalContextBlock` so the
decoder can swap them in at the same levels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .local_context import LcbConfig, binarize_bbox, expand_bbox
from .nn import Conv2d, Module, zeros
from .tensor import Tensor, no_grad


@dataclass
class BaselineConfig:
    reduction: int = 4
    embed_channels: int = 0  # 0 means channels // 2

    def validate(self) -> None:
        if self.reduction < 1:
            raise ValueError(f"baseline.reduction must be >= 1, got {self.reduction}")
        if self.embed_channels < 0:
            raise ValueError(f"baseline.embed_channels must be >= 0, got {self.embed_channels}")


class SEBlock(Module):
    """Channel gate ``sigmoid(W2 relu(W1 gap(f)))`` multiplied into ``f``.

    W2 starts at zero, so the initial gate is 0.5 everywhere.
    """

    def __init__(self, channels: int, reduction: int = 4):
        if channels % reduction:
            raise ValueError(f"reduction {reduction} does not divide {channels} channels")
        self.squeeze = Conv2d(channels, channels // reduction, k=1)
        self.excite = Conv2d(channels // reduction, channels, k=1, init=zeros)
        self.last_attention = None

    def forward(self, feature: Tensor, coarse_pred=None, boxes=None) -> Tensor:
        gate = ops.sigmoid(self.excite(ops.relu(self.squeeze(ops.global_avg_pool(feature)))))
        self.last_attention = gate.data
        return ops.mul(feature, gate)


class NonLocalBlock(Module):
    """Dense (HW x HW) affinity with a zero-initialized residual projection."""

    def __init__(self, channels: int, embed_channels: int = 0):
        e = embed_channels or max(channels // 2, 1)
        self.theta = Conv2d(channels, e, k=1)
        self.phi = Conv2d(channels, e, k=1)
        self.g = Conv2d(channels, e, k=1)
        self.proj = Conv2d(e, channels, k=1, init=zeros)
        self.last_affinity = None

    def affinity(self, feature: Tensor) -> Tensor:
        n, _, h, w = feature.shape
        e = self.theta.out_channels
        theta = ops.reshape(self.theta(feature), (n, e, h * w))
        phi = ops.reshape(self.phi(feature), (n, e, h * w))
        return ops.softmax(ops.matmul(ops.transpose(theta, (0, 2, 1)), phi), axis=-1)

    def forward(self, feature: Tensor, coarse_pred=None, boxes=None) -> Tensor:
        n, _, h, w = feature.shape
        e = self.theta.out_channels
        a = self.affinity(feature)
        self.last_affinity = a.data
        g = ops.reshape(self.g(feature), (n, e, h * w))
        y = ops.reshape(ops.matmul(g, ops.transpose(a, (0, 2, 1))), (n, e, h, w))
        return ops.add(feature, self.proj(y))


class LocalAffinityBlock(Module):
    """Affinity between every position and the ``k x k`` positions of a local crop.

    The crop is taken like the correlation kernel of the local context block,
    but without normalization. Each position attends (softmax over the k*k
    local positions, using channel dot products) and gathers the local
    features; the result enters through a zero-initialized projection.
    """

    def __init__(self, channels: int, lcb: LcbConfig):
        self.kernel_size = lcb.kernel_size
        self.ratio = max(lcb.scales)
        self.threshold = lcb.threshold
        self.proj = Conv2d(channels, channels, k=1, init=zeros)
        self.last_affinity = None
        self.last_boxes = []

    def forward(self, feature: Tensor, coarse_pred: Tensor, boxes=None) -> Tensor:
        n, c, h, w = feature.shape
        k = self.kernel_size
        if boxes is None:
            with no_grad():
                small = ops.bilinear_resize(Tensor(coarse_pred.data), h, w)
            boxes = binarize_bbox(small, self.threshold)
        self.last_boxes = list(boxes)
        gathered, affinities = [], []
        for i in range(n):
            f_i = feature[i:i + 1]
            local = ops.crop_resize(f_i, expand_bbox(boxes[i], self.ratio, (h, w)), k, k)
            local = ops.reshape(local, (1, c, k * k))
            flat = ops.reshape(f_i, (1, c, h * w))
            a = ops.softmax(ops.matmul(ops.transpose(flat, (0, 2, 1)), local), axis=-1)
            affinities.append(a.data)
            y = ops.matmul(local, ops.transpose(a, (0, 2, 1)))
            gathered.append(ops.reshape(y, (1, c, h, w)))
        self.last_affinity = np.concatenate(affinities)
        y = gathered[0] if n == 1 else ops.concat(gathered, axis=0)
        return ops.add(feature, self.proj(y))
