"""Compare the compiled kernels with the numpy fallback.

Run with ``python benchmarks/bench_kernels.py``. Prints the median time of
each kernel on shapes taken from the default 64x64 network, then a whole
forward/backward training step with each backend. Also confirms both
backends agree bit for bit on every case.
"""
import argparse
import statistics
import time
import types

import numpy as np

from lcanet import _npkernels, ops
from lcanet.config import RunConfig
from lcanet.network import LCANet
from lcanet.objectives import total_loss
from lcanet.tensor import Tensor

try:
    from lcanet import _ckernels
except ImportError:
    _ckernels = None

# (N, C, H, W) inputs seen by the 3x3 convs of the default model at batch 8
CONV_SHAPES = [(8, 3, 64, 64), (8, 16, 32, 32), (8, 32, 16, 16), (8, 64, 8, 8)]
POOL_SHAPES = [(8, 16, 64, 64), (8, 32, 32, 32), (8, 64, 16, 16)]


def median_time(fn, repeat):
    fn()  # warm up
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def kernel_rows(impl, repeat, rng):
    rows = []
    for shape in CONV_SHAPES:
        x = rng.standard_normal(shape).astype(np.float32)
        n, c, h, w = shape
        cols = impl.im2col(x, 3, 3, 1, 1)
        rows.append((f"im2col {shape}", median_time(lambda: impl.im2col(x, 3, 3, 1, 1), repeat), cols))
        back = impl.col2im(cols, n, c, h, w, 3, 3, 1, 1)
        rows.append((f"col2im {shape}", median_time(lambda: impl.col2im(cols, n, c, h, w, 3, 3, 1, 1), repeat), back))
    for shape in POOL_SHAPES:
        x = rng.standard_normal(shape).astype(np.float32)
        out, arg = impl.maxpool2_forward(x)
        rows.append((f"maxpool fwd {shape}", median_time(lambda: impl.maxpool2_forward(x), repeat), out))
        g = rng.standard_normal(out.shape).astype(np.float32)
        gx = impl.maxpool2_backward(g, arg)
        rows.append((f"maxpool bwd {shape}", median_time(lambda: impl.maxpool2_backward(g, arg), repeat), gx))
    return rows


def train_step_time(impl, repeat):
    cfg = RunConfig()
    model = LCANet(cfg.model)
    model.reset_parameters(0)
    rng = np.random.default_rng(0)
    images = Tensor(rng.standard_normal((8, 3, 64, 64)).astype(np.float32))
    masks = (rng.random((8, 1, 64, 64)) > 0.5).astype(np.float32)

    def step():
        total_loss(model(images), masks, cfg.loss).loss.backward()
        model.zero_grad()

    saved = ops.kernels
    ops.kernels = types.SimpleNamespace(
        im2col=impl.im2col, col2im=impl.col2im,
        maxpool2_forward=impl.maxpool2_forward, maxpool2_backward=impl.maxpool2_backward,
    )
    try:
        return median_time(step, repeat)
    finally:
        ops.kernels = saved


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--step-repeat", type=int, default=5)
    args = parser.parse_args()
    if _ckernels is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation` first")

    rng_seed = 0
    np_rows = kernel_rows(_npkernels, args.repeat, np.random.default_rng(rng_seed))
    c_rows = kernel_rows(_ckernels, args.repeat, np.random.default_rng(rng_seed))
    print(f"{'case':40s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}  identical")
    for (name, t_np, out_np), (_, t_c, out_c) in zip(np_rows, c_rows):
        same = np.array_equal(np.asarray(out_np), np.asarray(out_c))
        print(f"{name:40s} {t_np * 1e3:10.3f} {t_c * 1e3:10.3f} {t_np / t_c:8.2f}x  {same}")
    t_np = train_step_time(_npkernels, args.step_repeat)
    t_c = train_step_time(_ckernels, args.step_repeat)
    print(f"{'train step (batch 8, 64x64, full model)':40s} {t_np * 1e3:10.1f} {t_c * 1e3:10.1f} {t_np / t_c:8.2f}x")


if __name__ == "__main__":
    main()
