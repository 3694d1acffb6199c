import math
from types import SimpleNamespace

import numpy as np
import pytest

from lcanet import ops
from lcanet.gradcheck import grad_check
from lcanet.objectives import (LossConfig, OptimizerConfig, bce_loss, boundary_loss, edge_target,
                               ohem_bce, ohem_count, pixel_bce, poly_lr, sgd_update, total_loss)
from lcanet.tensor import Parameter, Tensor

from conftest import randn


def bce_scalar(p, t):
    p = min(max(float(p), 1e-7), 1 - 1e-7)
    return -(t * math.log(p) + (1 - t) * math.log(1 - p))


def bce_ref(pred, target):
    vals = [bce_scalar(p, t) for p, t in zip(np.ravel(pred), np.ravel(target))]
    return sum(vals) / len(vals), np.array(vals)


def sobel_np(m):
    p = np.pad(m.astype(np.float64), 1, mode="edge")
    k = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]])
    gx = sum(k[u, v] * p[u:u + m.shape[0], v:v + m.shape[1]] for u in range(3) for v in range(3))
    gy = sum(k[v, u] * p[u:u + m.shape[0], v:v + m.shape[1]] for u in range(3) for v in range(3))
    return np.hypot(gx, gy) / (4 * math.sqrt(2))


def boundary_ref(pred, target, thr=0.3):
    e_t = (sobel_np(target) > thr).astype(float)
    e_p = np.clip(sobel_np(pred), 1e-7, 1 - 1e-7)
    return bce_ref(e_p, e_t)[0]


def maps(rng, shape=(1, 1, 8, 8)):
    pred = (0.05 + 0.9 * rng.random(shape)).astype(np.float32)
    target = (rng.random(shape) > 0.5).astype(np.float32)
    return pred, target


# --- cross-entropy -----------------------------------------------------------------

def test_fair_coin():
    loss = bce_loss(Tensor(np.full((1, 1, 4, 4), 0.5)), np.full((1, 1, 4, 4), 0.5)).item()
    assert abs(loss - math.log(2)) < 1e-6


def test_perfect_prediction_hits_clamp_floor():
    t = (np.arange(16).reshape(1, 1, 4, 4) % 3 == 0).astype(np.float32)
    loss = bce_loss(Tensor(t), t).item()
    assert 0 < loss < 2e-6


def test_bce_per_pixel(rng):
    pred, target = maps(rng)
    want, per = bce_ref(pred, target)
    assert abs(bce_loss(Tensor(pred), target).item() - want) < 1e-6
    np.testing.assert_allclose(pixel_bce(Tensor(pred), target).data.ravel(), per, rtol=1e-5)


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        bce_loss(Tensor(np.full((1, 1, 4, 4), 0.5)), np.zeros((1, 1, 4, 5)))


def test_bce_extreme_inputs_finite():
    p = Tensor(np.array([[[[0.0, 1.0], [1.0, 0.0]]]]), requires_grad=True)
    loss = bce_loss(p, np.array([[[[1.0, 0.0], [1.0, 0.0]]]]))
    loss.backward()
    assert np.isfinite(loss.item()) and loss.item() > 0 and np.isfinite(p.grad).all()


# --- OHEM -------------------------------------------------------------------------

def test_ohem_keep_one_is_bce_bitwise(rng):
    pred, target = maps(rng, (2, 1, 16, 16))
    a = ohem_bce(Tensor(pred), target, keep=1.0, min_pixels=1).data
    b = bce_loss(Tensor(pred), target).data
    assert a.tobytes() == b.tobytes()


def test_ohem_single_wrong_pixel():
    target = np.ones((1, 1, 8, 8), np.float32)
    pred = np.full_like(target, 0.999)
    pred[0, 0, 3, 5] = 0.02
    got = ohem_bce(Tensor(pred), target, keep=1 / 64, min_pixels=1).item()
    assert abs(got - bce_scalar(0.02, 1.0)) < 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_ohem_full_sort(seed):
    r = np.random.default_rng(seed)
    pred, target = maps(r, (2, 1, 10, 10))
    keep, min_px = float(r.uniform(0.05, 0.9)), int(r.integers(1, 60))
    per = sorted(bce_ref(pred, target)[1], reverse=True)
    k = min(200, max(math.ceil(keep * 200), min_px))
    want = sum(per[:k]) / k
    assert abs(ohem_bce(Tensor(pred), target, keep, min_px).item() - want) < 1e-5


def test_ohem_count_rule():
    assert ohem_count(4096, 0.5, 256) == 2048
    assert ohem_count(400, 0.1, 256) == 256
    assert ohem_count(100, 0.1, 256) == 100


def test_ohem_gradients(rng):
    pred, target = maps(rng, (1, 1, 6, 6))
    p = Tensor(pred, requires_grad=True)
    assert grad_check(lambda: ohem_bce(p, target, 0.3, 5), {"p": p}).passed


# --- boundary loss -------------------------------------------------------------------

def test_constant_maps_near_floor():
    t = np.zeros((1, 1, 8, 8), np.float32)
    assert not edge_target(t, 0.3).any()
    assert boundary_loss(Tensor(np.full_like(t, 0.3)), t).item() < 2e-6


def test_step_edge_target():
    t = np.zeros((1, 1, 8, 8), np.float32)
    t[..., 4:] = 1
    e = edge_target(t, 0.3)[0, 0]
    assert e[:, 3:5].all() and not np.delete(e, [3, 4], axis=1).any()


def test_matching_step_scores_below_misplaced_ones():
    t = np.zeros((1, 1, 16, 16), np.float32)
    t[..., 6:12, 5:11] = 1
    same = boundary_loss(Tensor(t), t).item()
    shifted = boundary_loss(Tensor(np.roll(t, 3, axis=3)), t).item()
    blurred = boundary_loss(Tensor(np.full_like(t, 0.5)), t).item()
    assert same < shifted and same < blurred


@pytest.mark.parametrize("seed", range(5))
def test_boundary_composed(seed):
    pred, target = maps(np.random.default_rng(seed), (1, 1, 9, 7))
    got = boundary_loss(Tensor(pred), target, 0.3).item()
    assert abs(got - boundary_ref(pred[0, 0], target[0, 0])) < 1e-5


def test_boundary_gradients(rng):
    pred, target = maps(rng, (1, 1, 6, 6))
    p = Tensor(pred, requires_grad=True)
    # the edge magnitude is a square root that gets small on near-flat patches;
    # there a 1e-3 step is not small against its curvature, so the truncation
    # error is measured to fall off as eps^2 and a finer step is used
    coarse = grad_check(lambda: boundary_loss(p, target), {"p": p}, eps=1e-4).max_error
    fine = grad_check(lambda: boundary_loss(p, target), {"p": p}, eps=1e-5)
    assert fine.passed, str(fine)
    assert fine.max_error < coarse


# --- weighted total --------------------------------------------------------------------

def outputs(rng, refined=True):
    c, t = maps(rng, (2, 1, 16, 16))
    r = (0.05 + 0.9 * rng.random(c.shape)).astype(np.float32)
    return SimpleNamespace(coarse=Tensor(c), refined=Tensor(r) if refined else None), t


def test_single_term(rng):
    out, t = outputs(rng)
    b = total_loss(out, t, LossConfig(1, 0, 0, 0))
    assert b.total == b.l_cs
    assert b.loss.item() == pytest.approx(b.l_cs, rel=1e-6)


def test_all_zero_weights_rejected():
    with pytest.raises(ValueError):
        LossConfig(0, 0, 0, 0).validate()


def test_weighted_sum_matches_components(rng):
    out, t = outputs(rng)
    cfg = LossConfig(1, 1, 0.5, 0.5, ohem_keep=0.25, ohem_min_pixels=16)
    b = total_loss(out, t, cfg)
    parts = [ohem_bce(out.coarse, t, 0.25, 16).item(), ohem_bce(out.refined, t, 0.25, 16).item(),
             np.mean([boundary_ref(out.coarse.data[i, 0], t[i, 0]) for i in range(2)]),
             np.mean([boundary_ref(out.refined.data[i, 0], t[i, 0]) for i in range(2)])]
    np.testing.assert_allclose(b.as_row()[:4], parts, rtol=1e-5)
    assert b.total == 1 * b.l_cs + 1 * b.l_rf + 0.5 * b.l_cs_bd + 0.5 * b.l_rf_bd
    assert b.loss.item() == pytest.approx(b.total, rel=1e-6)
    assert all(v >= 0 and math.isfinite(v) for v in b.as_row())


def test_coarse_only_zeroes_refined_terms(rng):
    out, t = outputs(rng, refined=False)
    b = total_loss(out, t, LossConfig())
    assert b.l_rf == 0 and b.l_rf_bd == 0 and b.total > 0


@pytest.mark.parametrize("bad", [dict(lambda0=-1), dict(ohem_keep=0), dict(ohem_min_pixels=0),
                                 dict(edge_threshold=1.0)])
def test_loss_config_validation(bad):
    with pytest.raises(ValueError):
        LossConfig(**bad).validate()


# --- schedule and optimizer --------------------------------------------------------------

def test_poly_lr():
    cfg = OptimizerConfig(base_lr=0.01, max_iter=100, power=0.9)
    assert poly_lr(0, cfg) == 0.01
    assert poly_lr(100, cfg) == 0.0 and poly_lr(150, cfg) == 0.0
    assert abs(poly_lr(50, cfg) - 0.01 * math.exp(0.9 * math.log(0.5))) < 1e-15


def param(values, grad):
    p = Parameter((len(values),), name="w")
    p.data[:] = values
    p.grad = np.asarray(grad, np.float32)
    return p


def test_plain_gradient_step():
    p = param([1.0, -2.0], [0.5, 0.25])
    sgd_update([p], 0.1, momentum=0.0, weight_decay=0.0)
    np.testing.assert_allclose(p.data, [0.95, -2.025])
    assert p.grad is None


def test_zero_gradient_fixed_point():
    p = param([1.0, 3.0], [0.0, 0.0])
    sgd_update([p], 0.5, momentum=0.9, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [1.0, 3.0])


def test_heavy_ball_recurrence():
    a, lr, m, wd = 3.0, 0.05, 0.9, 0.01
    p = param([2.0], [0.0])
    w, v = 2.0, 0.0
    for _ in range(2):
        p.grad = np.array([a * p.data[0]], np.float32)  # d/dw of a w^2 / 2
        v = m * v + a * w + wd * w
        w = w - lr * v
        sgd_update([p], lr, m, wd)
    assert abs(p.data[0] - w) < 1e-6


def test_missing_gradient_rejected():
    p = Parameter((2,), name="lonely")
    with pytest.raises(ValueError, match="lonely"):
        sgd_update([p], 0.1, 0.9, 0.0)


@pytest.mark.parametrize("bad", [dict(base_lr=0), dict(momentum=1.0), dict(weight_decay=-1),
                                 dict(max_iter=0), dict(power=0)])
def test_optimizer_config_validation(bad):
    with pytest.raises(ValueError):
        OptimizerConfig(**bad).validate()
