"""Built-in oracle suite behind ``lcanet self-test``."""
from __future__ import annotations

import contextlib
import io
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import evaluation, ops, oracles, pnm, serialize
from .bbox import BBox
from .gradcheck import grad_check
from .local_context import (LcbConfig, LocalContextBlock, LocalKernel, acf_apply, correlation_map,
                            lcc_planes)
from .network import LCANet, ModelConfig
from .objectives import bce_loss
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    seconds: float
    detail: str = ""


def _rand(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


def check_conv2d(rng):
    x, w, b = _rand(rng, 1, 2, 5, 5), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)
    err = np.abs(ops.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data - oracles.conv2d(x, w, b, 1, 1)).max()
    return err < 1e-5, f"max abs error {err:.2e}"


def check_correlation(rng):
    worst = 0.0
    for _ in range(5):
        f, k = _rand(rng, 2, 7, 7), _rand(rng, 2, 3, 3)
        got = correlation_map(Tensor(f[None]), LocalKernel(Tensor(k), 0.0, 1.0)).data[0, 0]
        worst = max(worst, np.abs(got - oracles.correlation(f, k)).max())
    return worst < 1e-5, f"max abs error {worst:.2e}"


def check_acf(rng):
    f, k = _rand(rng, 1, 3, 6, 6), _rand(rng, 3, 3, 3)
    got = acf_apply(Tensor(f), LocalKernel(Tensor(k), 0.0, 1.0)).data
    corr = oracles.correlation(f[0], k)
    want = f * (1.0 / (1.0 + np.exp(-corr)))[None, None]
    err = np.abs(got - want).max()
    return err < 1e-6, f"max abs error {err:.2e}"


def check_alignment(rng):
    hits = 0
    for _ in range(10):
        k = rng.random((1, 3, 3)).astype(np.float32) + 0.1
        img = np.zeros((1, 1, 11, 11), dtype=np.float32)
        r, c = rng.integers(1, 10, 2)
        img[0, 0, r - 1:r + 2, c - 1:c + 2] = k[0]
        corr = correlation_map(Tensor(img), LocalKernel(Tensor(k), 0.0, 1.0)).data[0, 0]
        hits += np.unravel_index(np.argmax(corr), corr.shape) == (r, c)
    return hits == 10, f"{hits}/10 peaks at the embedding center"


def check_lcc(rng):
    worst = 0.0
    for _ in range(5):
        h, w = rng.integers(2, 12, 2)
        r, c = float(rng.integers(0, h)), float(rng.integers(0, w))
        got = lcc_planes((r, c), int(h), int(w)).data[0]
        worst = max(worst, np.abs(got - oracles.lcc(r, c, h, w)).max())
        if not (got[0, int(r)] == 1).all() or not (got[1, :, int(c)] == 1).all():
            return False, "center row/column is not exactly 1"
    return worst < 1e-6, f"max abs error {worst:.2e}"


def check_resize(rng):
    img = rng.random((5, 4)).astype(np.float32)
    got = ops.bilinear_resize(Tensor(img[None, None]), 8, 7).data[0, 0]
    want = np.array([[oracles.bilinear_pixel(img, i, j, 8, 7) for j in range(7)] for i in range(8)])
    err = np.abs(got - want).max()
    return err < 1e-6, f"max abs error {err:.2e}"


def check_sobel(rng):
    img = rng.random((6, 6)).astype(np.float32)
    err = np.abs(ops.sobel_magnitude(Tensor(img[None, None])).data[0, 0] - oracles.sobel(img)).max()
    return err < 1e-6, f"max abs error {err:.2e}"


def check_metrics(rng):
    for _ in range(10):
        pred = rng.random((8, 8)).astype(np.float32)
        gt = (rng.random((8, 8)) > 0.6).astype(np.float32)
        gt[0, 0] = 1.0
        f, curve = evaluation.max_f(pred, gt)
        f_ref, curve_ref = oracles.max_f(pred, gt)
        if f != f_ref or not np.array_equal(curve, curve_ref):
            return False, "max_f differs from the threshold sweep"
        if evaluation.mae(pred, gt) != oracles.mae(pred, gt):
            return False, "mae differs from the per-pixel sum"
    perfect = evaluation.max_f(gt, gt)[0], evaluation.mae(gt, gt)
    return perfect == (1.0, 0.0), f"perfect prediction gives maxF={perfect[0]}, MAE={perfect[1]}"


def check_grad_ops(rng):
    x = Tensor(_rand(rng, 1, 1, 4, 4), requires_grad=True)
    w = Tensor(_rand(rng, 1, 1, 3, 3) * 0.5, requires_grad=True)
    t = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float32)
    report = grad_check(lambda: bce_loss(ops.sigmoid(ops.conv2d(x, w, None, 1, 1)), t), {"x": x, "w": w})
    sob = Tensor(rng.random((1, 1, 5, 5)).astype(np.float32), requires_grad=True)
    r2 = grad_check(lambda: ops.sum(ops.sobel_magnitude(sob)), {"sobel_in": sob})
    ok = report.passed and r2.passed
    return ok, f"max relative error {max(report.max_error, r2.max_error):.2e}"


def check_grad_lcb(rng):
    cfg = LcbConfig(kernel_size=3, scales=(0.1, 0.5), use_lcc=True)
    block = LocalContextBlock(3, cfg)
    block.reset_parameters(int(rng.integers(1 << 30)))
    block.fuse.weight.data += 0.2 * _rand(rng, *block.fuse.weight.shape)
    f = Tensor(_rand(rng, 1, 3, 8, 8), requires_grad=True)
    boxes = [BBox(2, 1, 5, 6)]
    target = _rand(rng, 1, 3, 8, 8)
    report = grad_check(lambda: ops.sum(ops.mul(block(f, None, boxes), target)),
                        {"feature": f, **dict(block.named_parameters())})
    return report.passed, f"max relative error {report.max_error:.2e}"


def check_grad_model(rng):
    cfg = ModelConfig(input_size=(32, 32), stage_channels=(2, 3, 4, 4, 4), decoder_channels=3,
                      lcb=LcbConfig(kernel_size=3))
    model = LCANet(cfg)
    model.reset_parameters(int(rng.integers(1 << 30)))
    for p in model.parameters():
        p.data += 0.1 * _rand(rng, *p.shape)
    image = Tensor(_rand(rng, 1, 3, 32, 32))
    target = (rng.random((1, 1, 32, 32)) > 0.5).astype(np.float32)
    boxes = model(image).boxes

    def loss():
        out = model(image, boxes)
        return ops.add(bce_loss(out.coarse, target), bce_loss(out.refined, target))

    report = grad_check(loss, dict(model.named_parameters()), eps=1e-6, max_entries=4)
    return report.passed, f"max relative error {report.max_error:.2e}"


def check_formats(rng):
    a = _rand(rng, 2, 3, 4, 5)
    if not np.array_equal(serialize.read_tensor_from(io.BytesIO(serialize.tensor_bytes(a))), a):
        return False, ".ten round trip changed values"
    state = {"w": a, "b": _rand(rng, 3)}
    blob = serialize.checkpoint_bytes(state)
    back = serialize.read_checkpoint_from(io.BytesIO(blob))
    if list(back) != list(state) or serialize.checkpoint_bytes(back) != blob:
        return False, "LCAM round trip is not byte-exact"
    img = rng.integers(0, 256, (3, 5, 4)).astype(np.float32) / 255
    data = pnm.encode(img)
    if pnm.encode(pnm.decode(data)) != data:
        return False, "PPM round trip is not byte-exact"
    return True, ".ten, LCAM, PPM byte-exact"


CHECKS: list[tuple[str, Callable]] = [
    ("conv2d brute force", check_conv2d),
    ("correlation double sum", check_correlation),
    ("acf composition", check_acf),
    ("alignment peak", check_alignment),
    ("lcc planes", check_lcc),
    ("bilinear resize", check_resize),
    ("sobel stencil", check_sobel),
    ("metric threshold sweep", check_metrics),
    ("grad check: conv/sigmoid/bce, sobel", check_grad_ops),
    ("grad check: local context block", check_grad_lcb),
    ("grad check: full model", check_grad_model),
    ("format round trips", check_formats),
]


def run(seed: int = 0, inject_fault: bool = False) -> list[CheckResult]:
    """Run every check; with ``inject_fault`` all sigmoid gradients are doubled."""
    results = []
    fault = ops.sigmoid_grad_fault(2.0) if inject_fault else contextlib.nullcontext()
    with fault:
        for i, (name, fn) in enumerate(CHECKS):
            rng = np.random.default_rng([seed, i])
            start = time.perf_counter()
            try:
                ok, detail = fn(rng)
            except Exception as exc:  # a crash is a failed check, not a crashed suite
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            results.append(CheckResult(name, bool(ok), time.perf_counter() - start, detail))
    return results


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [
        f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.seconds * 1000:8.1f} ms  {r.detail}"
        for r in results
    ]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines)
