"""Differentiable tensor operations.

Every op takes and returns :class:`~lcanet.tensor.Tensor` objects and records a
backward closure when any input requires grad. Image tensors use NCHW layout.
Convolution is cross-correlation (no kernel flip).
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from . import _npkernels, kernels
from .bbox import BBox
from .tensor import Tensor, as_tensor, make_result

__all__ = [
    "add", "sub", "mul", "div", "matmul", "reshape", "transpose", "index", "sum", "mean",
    "exp", "log", "sqrt", "clamp", "sigmoid", "relu", "activation", "softmax", "concat",
    "concat_channels", "conv2d", "max_pool2d", "global_avg_pool", "bilinear_resize",
    "crop_resize", "pad_edge", "sobel_magnitude", "take_flat", "interp_matrix",
]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (batch dims must match)."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return make_result(np.matmul(a.data, b.data), (a, b), backward)


# --- shape manipulation -----------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_result(
        np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),)
    )


def index(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing."""

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return make_result(np.array(x.data[idx]), (x,), backward)


def take_flat(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather ``x.reshape(-1)[indices]`` as a 1-D tensor (indices must be unique)."""
    indices = np.asarray(indices, dtype=np.intp)

    def backward(g):
        full = np.zeros(x.size, dtype=g.dtype)
        full[indices] = g
        return (full.reshape(x.shape),)

    return make_result(x.data.reshape(-1)[indices], (x,), backward)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != axis
        ):
            raise ValueError(f"concat along axis {axis}: shape {t.shape} incompatible with {ref}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)] if t.requires_grad else None)
        return tuple(out)

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def concat_channels(tensors) -> Tensor:
    """Stack NCHW tensors along the channel axis, in the given order."""
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors:
        if t.ndim != 4:
            raise ValueError(f"concat_channels expects NCHW tensors, got shape {t.shape}")
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ValueError(
                f"spatial/batch mismatch in concat_channels: {t.shape} vs {tensors[0].shape}"
            )
    return concat(tensors, axis=1)


# --- reductions -------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(np.mean(x.data, axis=axis, keepdims=keepdims))
    count = x.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_result(out, (x,), backward)


# --- elementwise nonlinearities ---------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    """Square root with the subgradient 0 at 0 (avoids inf*0 in backward)."""
    out = np.sqrt(x.data)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return make_result(out, (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)

    def backward(g):
        return (np.where((x.data >= lo) & (x.data <= hi), g, 0.0),)

    return make_result(out, (x,), backward)


# Test hook for the self-test's negative control: when not 1, every sigmoid
# backward is scaled by this factor, which a gradient check must catch.
_sigmoid_grad_fault = 1.0


@contextlib.contextmanager
def sigmoid_grad_fault(scale: float):
    global _sigmoid_grad_fault
    previous, _sigmoid_grad_fault = _sigmoid_grad_fault, float(scale)
    try:
        yield
    finally:
        _sigmoid_grad_fault = previous


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, kept strictly inside (0, 1) even where it would round to 0 or 1."""
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    out = np.clip(out, np.nextafter(z.dtype.type(0), z.dtype.type(1)), np.nextafter(z.dtype.type(1), z.dtype.type(0)))
    fault = _sigmoid_grad_fault

    def backward(g):
        grad = g * out * (1.0 - out)
        return (grad * fault if fault != 1.0 else grad,)

    return make_result(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}; expected 'sigmoid' or 'relu'")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


# --- convolution and pooling --------------------------------------------------

def _out_extent(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW input, OC x IC x kh x kw weight."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and 4-D weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, weight expects {ic}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if bias is not None and bias.shape != (oc,):
        raise ValueError(f"bias shape {bias.shape} does not match {oc} output channels")
    oh, ow = _out_extent(h, kh, stride, padding), _out_extent(w, kw, stride, padding)
    xd = np.ascontiguousarray(x.data)
    kern = kernels if xd.dtype == np.float32 else _npkernels
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols = np.ascontiguousarray(xd.transpose(1, 0, 2, 3)).reshape(c, n * h * w)
    else:
        cols = kern.im2col(xd, kh, kw, stride, padding)
    w2 = weight.data.reshape(oc, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(oc, n, oh, ow).transpose(1, 0, 2, 3))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(oc, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = w2.T @ g2
            if kh == 1 and kw == 1 and stride == 1 and padding == 0:
                gx = np.ascontiguousarray(gcols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
            else:
                gx = kern.col2im(np.ascontiguousarray(gcols), n, c, h, w, kh, kw, stride, padding)
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 (first maximum in a window takes the gradient)."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"max_pool2d needs NCHW input with even H, W; got {x.shape}")
    xd = np.ascontiguousarray(x.data)
    kern = kernels if xd.dtype == np.float32 else _npkernels
    out, arg = kern.maxpool2_forward(xd)
    return make_result(
        out, (x,), lambda g: (kern.maxpool2_backward(np.ascontiguousarray(g, dtype=xd.dtype), arg),)
    )


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects NCHW input, got {x.shape}")
    return mean(x, axis=(2, 3), keepdims=True)


# --- resampling ---------------------------------------------------------------

def interp_matrix(in_size: int, out_size: int, start: int = 0, length: int | None = None) -> np.ndarray:
    """Bilinear (align_corners=False) weights mapping ``in_size`` samples to ``out_size``.

    Only the window ``[start, start + length)`` of the input is resampled.
    Returns a float64 ``(out_size, in_size)`` matrix whose rows sum to 1.
    """
    if out_size < 1:
        raise ValueError(f"target size must be >= 1, got {out_size}")
    length = in_size - start if length is None else length
    m = np.zeros((out_size, in_size), dtype=np.float64)
    scale = length / out_size
    for i in range(out_size):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), length - 1)
        i1 = min(i0 + 1, length - 1)
        lam = src - i0 if i1 != i0 else 0.0
        m[i, start + i0] += 1.0 - lam
        m[i, start + i1] += lam
    return m


def _resample(x: Tensor, ry: np.ndarray, rx: np.ndarray) -> Tensor:
    dt = x.data.dtype
    out = (ry @ x.data.astype(np.float64) @ rx.T).astype(dt)

    def backward(g):
        return ((ry.T @ g.astype(np.float64) @ rx).astype(dt),)

    return make_result(out, (x,), backward)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of an NCHW tensor (align_corners=False, edge-clamped)."""
    if x.ndim != 4:
        raise ValueError(f"bilinear_resize expects NCHW input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return make_result(x.data.copy(), (x,), lambda g: (g,))
    return _resample(x, interp_matrix(h, out_h), interp_matrix(w, out_w))


def crop_resize(x: Tensor, box: BBox, out_h: int, out_w: int) -> Tensor:
    """Resample the (clamped, inclusive) box region of ``x`` to ``out_h x out_w``."""
    if x.ndim != 4:
        raise ValueError(f"crop_resize expects NCHW input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    b = box.clamp(h, w)
    ry = interp_matrix(h, out_h, b.y_min, b.height)
    rx = interp_matrix(w, out_w, b.x_min, b.width)
    return _resample(x, ry, rx)


# --- edges ------------------------------------------------------------------

def pad_edge(x: Tensor, p: int) -> Tensor:
    """Replicate-pad the last two axes by ``p`` pixels."""
    h, w = x.shape[-2:]
    out = np.pad(x.data, [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)], mode="edge")

    def backward(g):
        g = g.copy()
        g[..., p, :] += g[..., :p, :].sum(axis=-2)
        g[..., p + h - 1, :] += g[..., p + h:, :].sum(axis=-2)
        g = g[..., p:p + h, :]
        g[..., p] += g[..., :p].sum(axis=-1)
        g[..., p + w - 1] += g[..., p + w:].sum(axis=-1)
        return (np.ascontiguousarray(g[..., p:p + w]),)

    return make_result(out, (x,), backward)


SOBEL_NORM = 4.0 * math.sqrt(2.0)


def _sobel_pair(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sobel responses of a padded map, as differences first so flat areas cancel exactly."""
    dx = p[..., :, 2:] - p[..., :, :-2]
    dy = p[..., 2:, :] - p[..., :-2, :]
    gx = dx[..., :-2, :] + 2 * dx[..., 1:-1, :] + dx[..., 2:, :]
    gy = dy[..., :, :-2] + 2 * dy[..., :, 1:-1] + dy[..., :, 2:]
    return gx, gy


def _sobel_pair_adjoint(ggx: np.ndarray, ggy: np.ndarray) -> np.ndarray:
    h, w = ggx.shape[-2:]
    gdx = np.zeros(ggx.shape[:-2] + (h + 2, w), ggx.dtype)
    gdx[..., :-2, :] += ggx
    gdx[..., 1:-1, :] += 2 * ggx
    gdx[..., 2:, :] += ggx
    gdy = np.zeros(ggy.shape[:-2] + (h, w + 2), ggy.dtype)
    gdy[..., :, :-2] += ggy
    gdy[..., :, 1:-1] += 2 * ggy
    gdy[..., :, 2:] += ggy
    gp = np.zeros(ggx.shape[:-2] + (h + 2, w + 2), ggx.dtype)
    gp[..., :, 2:] += gdx
    gp[..., :, :-2] -= gdx
    gp[..., 2:, :] += gdy
    gp[..., :-2, :] -= gdy
    return gp


def sobel_magnitude(x: Tensor) -> Tensor:
    """Normalized Sobel gradient magnitude of a single-channel map.

    Borders are replicate-padded, so constant regions (including those touching
    the image edge) give exactly zero. Inputs in [0, 1] map into [0, 1].
    """
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"sobel_magnitude expects an N x 1 x H x W map, got {x.shape}")
    padded = pad_edge(x, 1)
    gx, gy = _sobel_pair(padded.data)
    out = make_result(np.concatenate([gx, gy], axis=1), (padded,),
                      lambda g: (_sobel_pair_adjoint(g[:, :1], g[:, 1:]),))
    mag2 = sum(mul(out, out), axis=1, keepdims=True)
    return mul(sqrt(mag2), 1.0 / SOBEL_NORM)
