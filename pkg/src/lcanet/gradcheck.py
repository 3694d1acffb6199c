"""Central finite-difference checking of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, no_grad, precision


@dataclass
class GradCheckReport:
    """Per-tensor max relative error between analytic and numeric gradients.

    The error of a tensor is ``max|a - n| / max(max|a|, max|n|)`` over the
    checked entries, i.e. relative to that tensor's gradient scale. The scale
    is floored so that a gradient that is (nearly) identically zero, such as a
    bias feeding a shift-invariant softmax, is not judged on float32 rounding
    noise alone. That noise is proportional to the largest gradient anywhere
    in the graph, so the default floor is ``1e-3`` times that magnitude (an
    absolute slack of about eight float32 ulps of the largest gradient).
    """

    errors: dict[str, float] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)
    tol: float = 1e-3

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def __str__(self):
        lines = [f"{name}: {err:.3e}" for name, err in self.errors.items()]
        lines += [f"FAIL {msg}" for msg in self.failures]
        return "\n".join(lines)


def _evaluate(fn) -> float:
    with no_grad():
        return float(np.asarray(fn().data, dtype=np.float64).reshape(-1)[0])


def grad_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-3,
    tol: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float | None = None,
) -> GradCheckReport:
    """Compare backward() gradients of ``fn()`` against central differences.

    ``fn`` must rebuild its graph from the current contents of ``params`` on
    every call. The analytic gradient comes from the normal float32 path; the
    finite differences re-run ``fn`` in float64 at the same (float32) point.
    ``max_entries`` bounds how many coordinates per tensor are perturbed,
    chosen at random with ``seed``.
    """
    report = GradCheckReport(tol=tol)
    for t in params.values():
        t.requires_grad = True
        t.zero_grad()
    loss = fn()
    if loss.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        report.failures.append("loss: non-finite value at the unperturbed point")
        return report
    loss.backward()
    if floor is None:
        biggest = max((np.abs(t.grad).max(initial=0.0) for t in params.values() if t.grad is not None),
                      default=0.0)
        floor = max(1e-3 * float(biggest), 1e-12)

    originals = {name: t.data for name, t in params.items()}
    rng = np.random.default_rng(seed)
    try:
        for t in params.values():
            t.data = t.data.astype(np.float64)
        with precision(np.float64):
            for name, t in params.items():
                _check_one(fn, name, t, eps, tol, max_entries, rng, report, floor)
    finally:
        for name, t in params.items():
            t.data = originals[name]
    return report


def _check_one(fn, name, t, eps, tol, max_entries, rng, report, floor):
    analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
    bad = np.argwhere(~np.isfinite(analytic))
    if bad.size:
        report.failures.append(f"{name}: non-finite analytic gradient at {tuple(int(v) for v in bad[0])}")
        return
    flat = t.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
    numeric = np.empty(idx.size)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        f_up = _evaluate(fn)
        flat[i] = orig - eps
        f_down = _evaluate(fn)
        flat[i] = orig
        numeric[j] = (f_up - f_down) / (2.0 * eps)
        if not np.isfinite(numeric[j]):
            loc = tuple(int(v) for v in np.unravel_index(i, t.shape))
            report.failures.append(f"{name}: non-finite numeric gradient at {loc}")
            return
    a = analytic.reshape(-1)[idx]
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    err = float(np.abs(a - numeric).max() / scale)
    report.errors[name] = err
    if not err < tol:
        worst = idx[int(np.argmax(np.abs(a - numeric)))]
        loc = tuple(int(v) for v in np.unravel_index(worst, t.shape))
        report.failures.append(f"{name}: relative error {err:.3e} >= {tol:g} (worst at {loc})")
