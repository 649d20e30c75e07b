"""Per-pair SVF registration that fits the teacher trajectory.

The objective is

    E(v) = mean((W * (warp(x_d5, exp(v)) - x_y1))**2) / HU_SCALE**2
           + lambda_smooth * mean(sum of squared forward differences of v)

and its gradient is accumulated in reverse through the scaling-and-squaring
recursion (exact for the discretized computation).
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .diffeo import TeacherTrajectory, exp_svf, jacobian_positivity
from .metrics import evaluate_pair, mae
from .volume import Stencil, check_same_shape, identity_grid

log = logging.getLogger(__name__)

# HU differences are divided by this before squaring so the data and
# smoothness terms live on comparable scales.
HU_SCALE = 100.0


class RegistrationError(ArithmeticError):
    """Non-finite inputs or a non-finite objective during fitting."""


@dataclass
class RegistrationConfig:
    iters: int = 150
    step_size: float = 2.0
    lambda_smooth: float = 0.1
    K: int = 5
    weight_map: np.ndarray = None
    momentum: float = 0.9
    max_backtracks: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.iters <= 0:
            raise ValueError("iters must be > 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.lambda_smooth < 0:
            raise ValueError("lambda_smooth must be >= 0")


@dataclass
class RegistrationReport:
    loss_history: list = field(default_factory=list)
    final_weighted_mse: float = math.nan
    jacobian_positive_fraction: float = math.nan
    endpoint_mae_bone: float = math.nan
    iters_run: int = 0

    def as_dict(self):
        return {
            "final_weighted_mse": self.final_weighted_mse,
            "endpoint_mae_bone": self.endpoint_mae_bone,
            "jacobian_positive_fraction": self.jacobian_positive_fraction,
            "iters_run": self.iters_run,
        }


def _smoothness(v):
    n = v[0].size
    val = 0.0
    grad = np.zeros_like(v)
    for axis in (1, 2, 3):
        diff = np.diff(v, axis=axis)
        val += float((diff**2).sum())
        pad_lo = [(0, 0)] * 4
        pad_hi = [(0, 0)] * 4
        pad_lo[axis] = (1, 0)
        pad_hi[axis] = (0, 1)
        # d/dv of sum(diff**2): -2*diff at the lower index, +2*diff at the upper
        grad += 2.0 * (np.pad(diff, pad_lo) - np.pad(diff, pad_hi))
    return val / n, grad / n


def registration_objective(v, x_d5, x_y1, weight, lambda_smooth, K, with_grad=True):
    """Return ``(objective, weighted_mse_hu2, gradient or None)``."""
    disp, stack = exp_svf(v, 1.0, K, return_stack=True)
    grid = identity_grid(x_d5.shape)
    final = Stencil(x_d5.shape, grid + disp)
    warped = final.sample(x_d5)
    resid = warped - x_y1
    w2 = weight**2
    n = resid.size
    wmse = float((w2 * resid**2).sum() / n)
    smooth, smooth_grad = _smoothness(v)
    obj = wmse / HU_SCALE**2 + lambda_smooth * smooth
    if not with_grad:
        return obj, wmse, None

    g_out = 2.0 * w2 * resid / (n * HU_SCALE**2)
    g = g_out[None] * final.point_gradient(x_d5)
    for k in range(K, 0, -1):
        d_prev = stack[k - 1]
        st = Stencil(x_d5.shape, grid + d_prev)
        g_prev = g.copy()
        for c in range(3):
            # field argument of interp(d_prev, w + d_prev(w))
            g_prev[c] += st.scatter(g[c])
            # coordinate argument
            g_prev += g[c][None] * st.point_gradient(d_prev[c])
        g = g_prev
    grad = g / 2.0**K + lambda_smooth * smooth_grad
    return obj, wmse, grad


def fit_teacher(x_d5, x_y1, cfg, init=None, callback=None):
    """Fit an SVF so that ``warp(x_d5, exp(v))`` matches ``x_y1``.

    Heavy-ball gradient descent with backtracking: a step that raises the
    objective is halved (momentum reset) up to ``cfg.max_backtracks`` times.
    Returns ``(svf, RegistrationReport)``.
    """
    check_same_shape(x_d5, x_y1)
    weight = np.ones_like(x_d5) if cfg.weight_map is None else cfg.weight_map
    check_same_shape(x_d5, weight)
    for name, arr in (("x_d5", x_d5), ("x_y1", x_y1), ("weight_map", weight)):
        if not np.isfinite(arr).all():
            raise RegistrationError(f"non-finite values in {name}")
    v = np.zeros((3,) + x_d5.shape) if init is None else np.array(init, dtype=np.float64)
    n = x_d5.size
    step = cfg.step_size
    vel = np.zeros_like(v)

    obj, wmse, grad = registration_objective(v, x_d5, x_y1, weight, cfg.lambda_smooth, cfg.K)
    report = RegistrationReport(loss_history=[obj])
    for iters in range(1, cfg.iters + 1):
        for _ in range(cfg.max_backtracks + 1):
            # gradients are per-voxel means; scale back to per-voxel magnitudes
            trial_vel = cfg.momentum * vel - step * n * grad
            trial = v + trial_vel
            t_obj, t_wmse, t_grad = registration_objective(
                trial, x_d5, x_y1, weight, cfg.lambda_smooth, cfg.K
            )
            if not math.isfinite(t_obj):
                raise RegistrationError(f"non-finite registration loss at iteration {iters}")
            if t_obj <= obj:
                break
            step *= 0.5
            vel = np.zeros_like(v)
        else:
            log.debug("backtracking exhausted at iteration %d", iters)
            break
        v, vel, obj, wmse, grad = trial, trial_vel, t_obj, t_wmse, t_grad
        report.loss_history.append(obj)
        if callback is not None:
            callback(iters, obj, wmse)

    disp = exp_svf(v, 1.0, cfg.K)
    report.final_weighted_mse = wmse
    report.jacobian_positive_fraction = jacobian_positivity(disp)
    report.iters_run = len(report.loss_history) - 1
    report.endpoint_mae_bone = mae(
        TeacherTrajectory(v, x_d5, squaring_steps=cfg.K).state(1.0), x_y1, bone_only=True
    )
    return v, report


def teacher_quality(x_d5, x_y1, svf, slab=None, K=None):
    """Metric row of the teacher endpoint ``x*_1`` against ``x_y1``."""
    endpoint = TeacherTrajectory(svf, x_d5, squaring_steps=K).state(1.0)
    return evaluate_pair(endpoint, x_y1, slab)
