"""Losses, the weighted training objective and the SGD/poly schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, as_tensor

LOG_EPS = 1e-7


@dataclass
class LossConfig:
    lambda0: float = 1.0  # coarse BCE
    lambda1: float = 1.0  # refined BCE
    lambda2: float = 0.5  # coarse boundary
    lambda3: float = 0.5  # refined boundary
    ohem_keep: float = 0.5
    ohem_min_pixels: int = 256
    edge_threshold: float = 0.3

    @property
    def weights(self) -> tuple[float, float, float, float]:
        return (self.lambda0, self.lambda1, self.lambda2, self.lambda3)

    def validate(self) -> None:
        if any(w < 0 for w in self.weights):
            raise ValueError(f"loss weights must be non-negative, got {self.weights}")
        if not any(w > 0 for w in self.weights):
            raise ValueError("at least one of loss.lambda0..lambda3 must be positive")
        if not 0.0 < self.ohem_keep <= 1.0:
            raise ValueError(f"loss.ohem_keep must lie in (0, 1], got {self.ohem_keep}")
        if self.ohem_min_pixels < 1:
            raise ValueError(f"loss.ohem_min_pixels must be >= 1, got {self.ohem_min_pixels}")
        if not 0.0 < self.edge_threshold < 1.0:
            raise ValueError(f"loss.edge_threshold must lie in (0, 1), got {self.edge_threshold}")


@dataclass
class LossBreakdown:
    l_cs: float
    l_rf: float
    l_cs_bd: float
    l_rf_bd: float
    weights: tuple[float, float, float, float]
    # the differentiable total, for backward(); not part of equality
    loss: Tensor | None = field(default=None, repr=False, compare=False)

    @property
    def total(self) -> float:
        w0, w1, w2, w3 = self.weights
        return w0 * self.l_cs + w1 * self.l_rf + w2 * self.l_cs_bd + w3 * self.l_rf_bd

    def as_row(self) -> list[float]:
        return [self.l_cs, self.l_rf, self.l_cs_bd, self.l_rf_bd, self.total]


@dataclass
class OptimizerConfig:
    base_lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    power: float = 0.9
    max_iter: int = 2000
    batch_size: int = 8
    checkpoint_every: int = 500

    def validate(self) -> None:
        for key in ("base_lr", "power"):
            if not getattr(self, key) > 0:
                raise ValueError(f"optim.{key} must be positive, got {getattr(self, key)}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"optim.momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"optim.weight_decay must be >= 0, got {self.weight_decay}")
        for key in ("max_iter", "batch_size", "checkpoint_every"):
            if getattr(self, key) < 1:
                raise ValueError(f"optim.{key} must be >= 1, got {getattr(self, key)}")


def _check_pair(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    return target


def pixel_bce(pred: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy with the prediction clamped away from 0 and 1."""
    t = _check_pair(pred, target)
    p = ops.clamp(pred, LOG_EPS, 1.0 - LOG_EPS)
    pos = ops.mul(t, ops.log(p))
    neg = ops.mul(1.0 - t.data, ops.log(1.0 - p))
    return -(pos + neg)


def bce_loss(pred: Tensor, target) -> Tensor:
    return ops.mean(pixel_bce(pred, target))


def ohem_count(count: int, keep: float, min_pixels: int) -> int:
    return min(count, max(math.ceil(keep * count), min_pixels))


def ohem_bce(pred: Tensor, target, keep: float = 0.5, min_pixels: int = 256) -> Tensor:
    """Mean BCE over the hardest pixels of the whole batch.

    The number kept is ``max(ceil(keep * count), min_pixels)``, capped at the
    pixel count; when every pixel is kept this is exactly :func:`bce_loss`.
    """
    per_pixel = pixel_bce(pred, target)
    k = ohem_count(per_pixel.size, keep, min_pixels)
    if k == per_pixel.size:
        return ops.mean(per_pixel)
    # stable sort, so ties are broken by pixel order and runs are reproducible
    order = np.argsort(-per_pixel.data.reshape(-1), kind="stable")[:k]
    return ops.mean(ops.take_flat(per_pixel, order))


def edge_target(target, threshold: float) -> np.ndarray:
    mag = ops.sobel_magnitude(Tensor(as_tensor(target).data)).data
    return (mag > threshold).astype(np.float32)


def boundary_loss(pred: Tensor, target, edge_threshold: float = 0.3) -> Tensor:
    t = _check_pair(pred, target)
    e_t = edge_target(t, edge_threshold)
    e_p = ops.clamp(ops.sobel_magnitude(pred), LOG_EPS, 1.0 - LOG_EPS)
    return bce_loss(e_p, e_t)


def total_loss(outputs, target, cfg: LossConfig) -> LossBreakdown:
    """Weighted sum of the four supervision terms for one forward pass.

    Without a refined map (coarse-only model) its two terms are zero.
    """
    target = as_tensor(target)
    w = cfg.weights
    terms = [
        ohem_bce(outputs.coarse, target, cfg.ohem_keep, cfg.ohem_min_pixels),
        None,
        boundary_loss(outputs.coarse, target, cfg.edge_threshold),
        None,
    ]
    if outputs.refined is not None:
        terms[1] = ohem_bce(outputs.refined, target, cfg.ohem_keep, cfg.ohem_min_pixels)
        terms[3] = boundary_loss(outputs.refined, target, cfg.edge_threshold)
    loss = None
    for weight, term in zip(w, terms):
        if term is None or weight == 0:
            continue
        part = ops.mul(term, float(weight))
        loss = part if loss is None else ops.add(loss, part)
    values = [0.0 if t is None else float(t.item()) for t in terms]
    return LossBreakdown(*values, weights=w, loss=loss)


def poly_lr(iteration: int, cfg: OptimizerConfig) -> float:
    if iteration >= cfg.max_iter:
        return 0.0
    return cfg.base_lr * (1.0 - iteration / cfg.max_iter) ** cfg.power


def sgd_update(params: list[Parameter], lr: float, momentum: float, weight_decay: float) -> None:
    """Heavy-ball SGD with L2 weight decay; clears the gradients afterwards."""
    missing = [p.name or repr(p) for p in params if p.grad is None]
    if missing:
        raise ValueError(f"no gradient for {missing[:5]}" + (" ..." if len(missing) > 5 else ""))
    for p in params:
        v = p.momentum_buffer
        v *= momentum
        v += p.grad + weight_decay * p.data
        p.data -= np.float32(lr) * v
        p.grad = None
