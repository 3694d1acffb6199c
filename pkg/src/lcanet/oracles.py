"""Slow, loop-based reference implementations used by ``lcanet self-test``.

Each one recomputes a result from its definition, pixel by pixel, without
sharing code with the vectorized operations it checks.
"""
from __future__ import annotations

import math

import numpy as np


def conv2d(x, w, b=None, stride=1, padding=0):
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for b_ in range(n):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if b is None else float(b[o])
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                r, q = i * stride + u - padding, j * stride + v - padding
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += float(w[o, ch, u, v]) * float(x[b_, ch, r, q])
                    out[b_, o, i, j] = acc
    return out


def correlation(feature, kernel):
    """Sum over channels and kernel taps of T[u, v] * I[x + u, y + v], zero outside."""
    c, h, w = feature.shape
    k = kernel.shape[-1]
    half = k // 2
    out = np.zeros((h, w))
    for x in range(h):
        for y in range(w):
            for u in range(-half, half + 1):
                for v in range(-half, half + 1):
                    if 0 <= x + u < h and 0 <= y + v < w:
                        for ch in range(c):
                            out[x, y] += kernel[ch, u + half, v + half] * feature[ch, x + u, y + v]
    return out


def bilinear_pixel(img, i, j, out_h, out_w, y0=0, x0=0, box_h=None, box_w=None):
    """One output pixel of an align-corners-false resize of ``img[y0:y0+box_h, x0:x0+box_w]``."""
    box_h = img.shape[0] - y0 if box_h is None else box_h
    box_w = img.shape[1] - x0 if box_w is None else box_w

    def coord(o, n_out, n_in):
        s = max((o + 0.5) * n_in / n_out - 0.5, 0.0)
        lo = min(int(math.floor(s)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        return lo, hi, (s - lo if hi != lo else 0.0)

    r0, r1, fy = coord(i, out_h, box_h)
    c0, c1, fx = coord(j, out_w, box_w)
    top = (1 - fx) * img[y0 + r0, x0 + c0] + fx * img[y0 + r0, x0 + c1]
    bottom = (1 - fx) * img[y0 + r1, x0 + c0] + fx * img[y0 + r1, x0 + c1]
    return (1 - fy) * top + fy * bottom


def sobel(img):
    """Normalized Sobel magnitude with replicated borders."""
    h, w = img.shape
    out = np.zeros((h, w))
    gx_k = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    for i in range(h):
        for j in range(w):
            gx = gy = 0.0
            for u in range(3):
                for v in range(3):
                    p = img[min(max(i + u - 1, 0), h - 1), min(max(j + v - 1, 0), w - 1)]
                    gx += gx_k[u][v] * p
                    gy += gx_k[v][u] * p
            out[i, j] = math.sqrt(gx * gx + gy * gy) / (4 * math.sqrt(2))
    return out


def lcc(center_row, center_col, h, w):
    out = np.zeros((2, h, w))
    for x in range(h):
        for y in range(w):
            out[0, x, y] = 1 - abs(x - center_row) / h
            out[1, x, y] = 1 - abs(y - center_col) / w
    return out


def max_f(pred, gt, beta2=0.3, n=256):
    """Explicit TP/FP/FN counting at every threshold ``i / n``."""
    best, curve = 0.0, []
    p, g = np.ravel(pred), np.ravel(gt) > 0.5
    for i in range(n):
        t = i / n
        tp = fp = fn = 0
        for v, pos in zip(p, g):
            hit = v > t
            tp += hit and pos
            fp += hit and not pos
            fn += (not hit) and pos
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        den = beta2 * prec + rec
        f = (1 + beta2) * prec * rec / den if den else 0.0
        curve.append(f)
        best = max(best, f)
    return best, np.array(curve)


def mae(pred, gt):
    p, g = np.ravel(pred), np.ravel(gt)
    return sum(abs(float(a) - float(b)) for a, b in zip(p, g)) / len(p)
