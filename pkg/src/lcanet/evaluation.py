"""Saliency metrics: mean absolute error and maximum F-measure."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, no_grad

N_THRESHOLDS = 256
BETA2 = 0.3


class EmptyGroundTruth(ValueError):
    """F-measure is undefined for a mask without positive pixels."""


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def thresholds(n: int = N_THRESHOLDS) -> np.ndarray:
    return np.arange(n, dtype=np.float64) / n


def mae(pred, gt) -> float:
    p, g = _array(pred), _array(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return float(np.mean(np.abs(p.astype(np.float64) - g.astype(np.float64))))


def precision_recall(pred, gt, n_thresholds: int = N_THRESHOLDS) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall of ``pred > t`` for ``t = i / n``, with 0/0 taken as 0.

    Counts come from sorted prediction values, which gives the same integers
    as thresholding the map once per level.
    """
    p, g = _array(pred), _array(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    g = g > 0.5
    n_pos = int(g.sum())
    if n_pos == 0:
        raise EmptyGroundTruth("ground truth has no positive pixel")
    t = thresholds(n_thresholds)
    on_pos = np.sort(p[g].astype(np.float64))
    on_neg = np.sort(p[~g].astype(np.float64))
    tp = on_pos.size - np.searchsorted(on_pos, t, side="right")
    fp = on_neg.size - np.searchsorted(on_neg, t, side="right")
    predicted = tp + fp
    precision = np.divide(tp, predicted, out=np.zeros(t.size), where=predicted > 0)
    recall = tp / n_pos
    return precision, recall


def f_measure(precision, recall, beta2: float = BETA2) -> np.ndarray:
    precision, recall = np.asarray(precision, float), np.asarray(recall, float)
    num = (1.0 + beta2) * precision * recall
    den = beta2 * precision + recall
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def max_f(pred, gt, beta2: float = BETA2, n_thresholds: int = N_THRESHOLDS) -> tuple[float, np.ndarray]:
    f = f_measure(*precision_recall(pred, gt, n_thresholds), beta2)
    return float(f.max()), f


@dataclass
class MetricReport:
    max_f: float
    mae: float
    per_threshold_f: np.ndarray = field(repr=False)
    n_images: int

    def to_dict(self) -> dict:
        return {
            "max_f": float(self.max_f),
            "mae": float(self.mae),
            "per_threshold_f": [float(v) for v in self.per_threshold_f],
            "n_images": int(self.n_images),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(d["max_f"], d["mae"], np.asarray(d["per_threshold_f"]), d["n_images"])

    def summary(self) -> str:
        return f"maxF={self.max_f:.4f} MAE={self.mae:.4f} over {self.n_images} images"


def aggregate(preds, gts, beta2: float = BETA2, per_image_f: bool = False,
              n_thresholds: int = N_THRESHOLDS) -> MetricReport:
    """Dataset report from per-image maps.

    By default precision and recall are averaged over images at each
    threshold and F is computed from the averages; ``per_image_f`` averages
    per-image F curves instead.
    """
    preds, gts = list(preds), list(gts)
    if not preds:
        raise ValueError("cannot evaluate an empty dataset")
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} masks")
    p_sum = np.zeros(n_thresholds)
    r_sum = np.zeros(n_thresholds)
    f_sum = np.zeros(n_thresholds)
    err = 0.0
    for p, g in zip(preds, gts):
        precision, recall = precision_recall(p, g, n_thresholds)
        p_sum += precision
        r_sum += recall
        f_sum += f_measure(precision, recall, beta2)
        err += mae(p, g)
    n = len(preds)
    curve = f_sum / n if per_image_f else f_measure(p_sum / n, r_sum / n, beta2)
    return MetricReport(float(curve.max()), err / n, curve, n)


def predict(model, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Run the model without recording gradients; returns N x H x W maps."""
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            outputs = model(Tensor(images[start:start + batch_size]))
            out.append(outputs.prediction.data[:, 0])
    return np.concatenate(out)


def evaluate_dataset(model, samples, mean=(0.0, 0.0, 0.0), batch_size: int = 8,
                     beta2: float = BETA2, per_image_f: bool = False) -> MetricReport:
    """Predict every sample (image mean-subtracted with ``mean``) and aggregate."""
    samples = list(samples)
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    shift = np.asarray(mean, dtype=np.float32).reshape(3, 1, 1)
    images = np.stack([s.image - shift for s in samples]).astype(np.float32)
    preds = predict(model, images, batch_size)
    return aggregate(preds, [s.mask[0] for s in samples], beta2, per_image_f)
