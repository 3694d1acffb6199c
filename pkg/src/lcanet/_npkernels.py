"""Pure-numpy versions of the compiled kernels in ``_ckernels.pyx``.

Results are bit-identical to the compiled path: gathers are exact copies and
``col2im`` accumulates kernel taps in the same (row-major tap) order.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def im2col(x, kh, kw, stride, padding):
    n, c, h, w = x.shape
    oh = _out_size(h, kh, stride, padding)
    ow = _out_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (n, c, oh, ow, kh, kw) -> (c, kh, kw, n, oh, ow)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * oh * ow)


def col2im(cols, n, c, h, w, kh, kw, stride, padding):
    oh = _out_size(h, kh, stride, padding)
    ow = _out_size(w, kw, stride, padding)
    cols = cols.reshape(c, kh, kw, n, oh, ow)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki:ki + stride * (oh - 1) + 1:stride, kj:kj + stride * (ow - 1) + 1:stride] += (
                cols[:, ki, kj].transpose(1, 0, 2, 3)
            )
    return np.ascontiguousarray(out[:, :, padding:padding + h, padding:padding + w])


def maxpool2_forward(x):
    n, c, h, w = x.shape
    win = x[:, :, : h // 2 * 2, : w // 2 * 2].reshape(n, c, h // 2, 2, w // 2, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = np.argmax(win, axis=-1).astype(np.int8)  # first max wins
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2_backward(grad, arg):
    n, c, oh, ow = grad.shape
    win = np.zeros((n, c, oh, ow, 4), dtype=grad.dtype)
    np.put_along_axis(win, arg[..., None].astype(np.intp), grad[..., None], axis=-1)
    win = win.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(win.reshape(n, c, 2 * oh, 2 * ow))
