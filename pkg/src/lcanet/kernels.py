"""Backend selection for the hot convolution/pooling loops.

The compiled extension is used when it has been built; otherwise (or when
``LCANET_PURE_PYTHON=1``) the numpy implementations are used. Both produce
bit-identical float32 output.
"""
import os

from . import _npkernels

BACKEND = "numpy"

if os.environ.get("LCANET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _npkernels
else:
    _impl = _npkernels

im2col = _impl.im2col
col2im = _impl.col2im
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
