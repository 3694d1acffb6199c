"""Synthetic saliency data, dataset directories, augmentation and batching.

A dataset directory holds ``images/<id>.ppm``, ``masks/<id>.pgm``,
``manifest.txt`` (one id per line) and ``stats.txt`` (per-channel means of the
images as stored, used for mean subtraction).
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import pnm
from .ops import interp_matrix

MIN_CLASS_PIXELS = 64
MIN_CONTRAST = 0.2


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W, float32
    mask: np.ndarray  # 1 x H x W, float32 in {0, 1}
    id: str

    def check(self) -> None:
        """Raise unless the mask has enough pixels of both classes."""
        pos = int(self.mask.sum())
        neg = self.mask.size - pos
        if pos < MIN_CLASS_PIXELS or neg < MIN_CLASS_PIXELS:
            raise ValueError(
                f"sample {self.id}: mask has {pos} positive / {neg} negative pixels, "
                f"need >= {MIN_CLASS_PIXELS} of each"
            )


def resize_array(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a ``C x H x W`` array (same convention as the network)."""
    h, w = a.shape[-2:]
    if (h, w) == (out_h, out_w):
        return a.copy()
    ry, rx = interp_matrix(h, out_h), interp_matrix(w, out_w)
    return (ry @ a.astype(np.float64) @ rx.T).astype(np.float32)


# --- synthetic generation -------------------------------------------------------

def _smooth_noise(rng, size: int, cells: int) -> np.ndarray:
    grid = rng.random((3, cells, cells))
    return resize_array(grid, size, size).astype(np.float64)


def _shape_mask(rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.2 * size, 0.8 * size, 2)
    ry, rx = rng.uniform(0.1 * size, 0.24 * size, 2)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    kind = rng.integers(3)
    if kind == 0:  # ellipse
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    if kind == 1:  # rotated rectangle
        return (np.abs(u) <= rx) & (np.abs(v) <= ry)
    # blob: a circle whose radius wobbles with the polar angle
    angle = np.arctan2(dy, dx)
    r = 0.5 * (rx + ry) * (1.0 + sum(
        rng.uniform(0.05, 0.2) * np.cos(k * angle + rng.uniform(0, 2 * np.pi)) for k in (2, 3, 5)
    ))
    return np.hypot(dy, dx) <= r


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    out = mask.copy()
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            out |= np.roll(np.roll(mask, dy, axis=0), dx, axis=1)
    return out


def _texture(rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.4, 1.2)
    stripes = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)))
    return 0.08 * stripes + 0.03 * rng.standard_normal((size, size))


def _draw(rng, size: int) -> tuple[np.ndarray, np.ndarray]:
    base = rng.uniform(0.15, 0.85, 3)
    image = base[:, None, None] + 0.3 * (_smooth_noise(rng, size, 5) - 0.5)
    image += 0.02 * rng.standard_normal((3, size, size))
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        for _attempt in range(30):
            shape = _shape_mask(rng, size)
            if shape.any() and not (shape & _dilate(mask, 2)).any():
                break
        else:
            continue
        # push one channel far from the background, jitter the others
        color = base + rng.uniform(-0.15, 0.15, 3)
        c = int(rng.integers(3))
        push = rng.uniform(0.35, 0.6)
        color[c] = base[c] - push if base[c] > 0.5 else base[c] + push
        layer = color[:, None, None] + _texture(rng, size)[None]
        image = np.where(shape[None], layer, image)
        mask |= shape
    return np.clip(image, 0.0, 1.0), mask


def contrast(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-channel |mean(foreground) - mean(background)|."""
    m = mask.reshape(mask.shape[-2:]) > 0.5
    return np.abs(image[:, m].mean(axis=1) - image[:, ~m].mean(axis=1))


def synth_sample(seed: int, index: int, size: int) -> Sample:
    """One synthetic image/mask pair, determined by (seed, index) alone.

    Draws are repeated until the quantized result has enough pixels of both
    classes and a foreground/background contrast of at least 0.2 in some
    channel.
    """
    if size < 32 or size % 32:
        raise ValueError(f"image size must be a positive multiple of 32, got {size}")
    rng = np.random.default_rng([seed, index])
    while True:
        image, mask = _draw(rng, size)
        # quantize exactly as the files will store it
        image = pnm.decode(pnm.encode(image))
        sample = Sample(image, mask[None].astype(np.float32), f"{index:05d}")
        pos = int(mask.sum())
        if min(pos, mask.size - pos) >= MIN_CLASS_PIXELS and contrast(image, mask).max() >= MIN_CONTRAST:
            return sample


def gen_synthetic(out_dir, count: int, size: int = 64, seed: int = 0) -> Path:
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    total = np.zeros(3)
    ids = []
    for index in range(count):
        s = synth_sample(seed, index, size)
        pnm.write(out / "images" / f"{s.id}.ppm", s.image)
        pnm.write(out / "masks" / f"{s.id}.pgm", s.mask[0])
        total += s.image.astype(np.float64).mean(axis=(1, 2))
        ids.append(s.id)
    (out / "manifest.txt").write_text("".join(f"{i}\n" for i in ids))
    write_stats(out, total / count)
    return out


def write_stats(out_dir, mean) -> None:
    text = "mean=" + ",".join(f"{m:.9g}" for m in mean) + "\n"
    Path(out_dir, "stats.txt").write_text(text)


def read_stats(data_dir) -> tuple[float, float, float]:
    path = Path(data_dir, "stats.txt")
    for line in path.read_text().splitlines():
        key, _, value = line.partition("=")
        if key.strip() == "mean":
            mean = tuple(float(v) for v in value.split(","))
            if len(mean) != 3:
                raise ValueError(f"{path}: mean needs 3 values, got {len(mean)}")
            return mean
    raise ValueError(f"{path}: no mean= line")


# --- loading ---------------------------------------------------------------------

def load_sample(image_path, mask_path) -> Sample:
    image = pnm.read(image_path)
    if image.ndim != 3:
        raise pnm.PnmError("expected a P6 colour image", 0, os.fspath(image_path))
    mask = pnm.read(mask_path)
    if mask.ndim != 2:
        raise pnm.PnmError("expected a P5 greyscale mask", 0, os.fspath(mask_path))
    if mask.shape != image.shape[1:]:
        raise ValueError(f"{mask_path}: mask {mask.shape} does not match image {image.shape[1:]}")
    return Sample(image, (mask >= 0.5).astype(np.float32)[None], Path(image_path).stem)


def read_manifest(data_dir) -> list[str]:
    path = Path(data_dir, "manifest.txt")
    if not path.is_file():
        raise FileNotFoundError(f"no manifest.txt in {data_dir}")
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def load_dataset(data_dir) -> list[Sample]:
    root = Path(data_dir)
    samples = [
        load_sample(root / "images" / f"{i}.ppm", root / "masks" / f"{i}.pgm") for i in read_manifest(root)
    ]
    if not samples:
        raise ValueError(f"dataset {data_dir} is empty")
    return samples


# --- augmentation ------------------------------------------------------------------

@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.8, 1.2)
    crop_to: tuple[int, int] | None = None  # None keeps the input size
    # None: take the training split's stats.txt when a run starts
    mean: tuple[float, float, float] | None = None
    min_retention: float = 0.5
    crop_tries: int = 10

    def validate(self) -> None:
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"augment.scale_range must satisfy 0 < low <= high, got {self.scale_range}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"augment.flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.mean is not None and len(self.mean) != 3:
            raise ValueError(f"augment.mean needs 3 values, got {self.mean}")
        if self.crop_to is not None and min(self.crop_to) < 1:
            raise ValueError(f"augment.crop_to must be positive, got {self.crop_to}")


def subtract_mean(image: np.ndarray, mean) -> np.ndarray:
    if mean is None:
        return image.astype(np.float32)
    return (image - np.asarray(mean, dtype=np.float32).reshape(3, 1, 1)).astype(np.float32)


def _window_sums(mask: np.ndarray, ch: int, cw: int) -> np.ndarray:
    integral = np.pad(mask.astype(np.float64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    return integral[ch:, cw:] - integral[:-ch, cw:] - integral[ch:, :-cw] + integral[:-ch, :-cw]


def choose_crop(mask: np.ndarray, ch: int, cw: int, rng, min_retention: float = 0.5,
                tries: int = 10) -> tuple[int, int]:
    """Top-left corner of a ``ch x cw`` window keeping enough of the mask.

    Up to ``tries`` uniformly drawn windows are tested; if none keeps
    ``min_retention`` of the positive pixels, the window keeping the most is
    used (first in row-major order on ties).
    """
    h, w = mask.shape
    sums = _window_sums(mask, ch, cw)
    total = float(mask.sum())
    for _ in range(tries):
        oy, ox = int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
        if total == 0 or sums[oy, ox] >= min_retention * total:
            return oy, ox
    oy, ox = np.unravel_index(int(np.argmax(sums)), sums.shape)
    return int(oy), int(ox)


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Flip, rescale, pad/crop and mean-subtract one sample.

    The random draws happen in a fixed order (flip, scale, crop) whatever
    their outcome, so a seeded generator reproduces the same stream.
    """
    image, mask = sample.image, sample.mask
    h, w = image.shape[1:]
    ch, cw = cfg.crop_to or (h, w)
    if rng.random() < cfg.flip_prob:
        image, mask = image[:, :, ::-1].copy(), mask[:, :, ::-1].copy()
    lo, hi = cfg.scale_range
    s = rng.uniform(lo, hi)
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    if (nh, nw) != (h, w):
        image = resize_array(image, nh, nw)
        mask = (resize_array(mask, nh, nw) >= 0.5).astype(np.float32)
    if nh < ch or nw < cw:
        ph, pw = max(ch - nh, 0), max(cw - nw, 0)
        pad = ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
        fill = np.asarray(cfg.mean or (0.0, 0.0, 0.0), dtype=np.float32).reshape(3, 1, 1)
        image = np.pad(image - fill, pad) + fill
        mask = np.pad(mask, pad)
        nh, nw = image.shape[1:]
    oy, ox = choose_crop(mask[0], ch, cw, rng, cfg.min_retention, cfg.crop_tries)
    image = image[:, oy:oy + ch, ox:ox + cw]
    mask = np.ascontiguousarray(mask[:, oy:oy + ch, ox:ox + cw])
    return Sample(subtract_mean(image, cfg.mean), mask, sample.id)


def batches(samples: list[Sample], batch_size: int, rng: np.random.Generator,
            cfg: AugmentConfig | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless stream of (images, masks) batches.

    Samples are visited in a fresh seeded permutation each epoch; a batch may
    straddle two epochs. With ``cfg=None`` samples are used as stored.
    """
    n = len(samples)
    if n == 0:
        raise ValueError("no samples to batch")
    order = np.empty(0, dtype=np.int64)
    while True:
        while order.size < batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        take, order = order[:batch_size], order[batch_size:]
        picked = [augment(samples[i], cfg, rng) if cfg is not None else samples[i] for i in take]
        yield (np.stack([p.image for p in picked]).astype(np.float32),
               np.stack([p.mask for p in picked]).astype(np.float32))

