"""Training losses and the Lyapunov guidance field.

Every loss returns ``(value, dL/d(prediction))`` with mean reductions over voxels,
so loss weights do not depend on the grid size.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .volume import check_same_shape, identity_grid

log = logging.getLogger(__name__)


class LossError(ArithmeticError):
    pass


@dataclass
class LossWeights:
    lambda_img: float = 0.2
    lambda_lyap: float = 0.0
    lambda_max: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        for name in ("lambda_img", "lambda_lyap", "lambda_max", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lambda_lyap > self.lambda_max:
            raise ValueError("lambda_lyap exceeds lambda_max")


def _mse(pred, target):
    check_same_shape(pred, target)
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def loss_rf(v_pred, x_d5, x_y1):
    """Rectified-flow loss against the straight-line velocity ``x_y1 - x_d5``."""
    return _mse(v_pred, x_y1 - x_d5)


def guidance_field(x_t, t, teacher, alpha=1.0, state=None):
    """``xdot*_t - alpha * (x_t - x*_t)``.

    ``state`` may carry a precomputed ``(x*_t, xdot*_t)`` to avoid re-warping.
    """
    x_star, x_dot = teacher.state_and_tangent(t) if state is None else state
    check_same_shape(x_t, x_star)
    return x_dot - alpha * (x_t - x_star)


def lyapunov_energy(x, t, teacher, alpha=1.0, x_star=None):
    """``alpha/2 * ||x - x*_t||^2`` (sum over voxels)."""
    if x_star is None:
        x_star = teacher.state(t)
    return 0.5 * alpha * float(np.sum((x - x_star) ** 2))


def loss_lyap(v_pred, x_t, t, teacher, alpha=1.0, state=None):
    """Distillation of the guidance field."""
    return _mse(v_pred, guidance_field(x_t, t, teacher, alpha, state))


def loss_mse_distill(v_pred, x_t, t, teacher, state=None):
    """Plain matching of the teacher tangent (no feedback term)."""
    return loss_lyap(v_pred, x_t, t, teacher, alpha=0.0, state=state)


@dataclass
class PlaneSpec:
    """Resection plane through ``point`` with unit ``normal`` (voxel coordinates)."""

    point: tuple
    normal: tuple

    @classmethod
    def axis_aligned(cls, shape, axis=0, index=None):
        point = [(n - 1) / 2.0 for n in shape]
        if index is not None:
            point[axis] = float(index)
        normal = [0.0, 0.0, 0.0]
        normal[axis] = 1.0
        return cls(tuple(point), tuple(normal))

    def distance(self, shape):
        grid = identity_grid(shape)
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        p = np.asarray(self.point, dtype=np.float64).reshape(3, 1, 1, 1)
        return np.abs(np.tensordot(n, grid - p, axes=1))

    def dominant_axis(self):
        return int(np.argmax(np.abs(self.normal)))


@dataclass
class ResectionWeight:
    W: np.ndarray
    sigma: float
    tau_hu: float
    plane: PlaneSpec
    degenerate: bool = False


def resection_weight(x_d5, sigma=6.0, tau_hu=300.0, plane=None):
    """Gaussian of the plane distance times the Day-5 bone mask, scaled to unit max."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if plane is None:
        plane = PlaneSpec.axis_aligned(x_d5.shape)
    d = plane.distance(x_d5.shape)
    w = np.exp(-(d**2) / (2.0 * sigma**2)) * (x_d5 > tau_hu)
    peak = w.max()
    if peak <= 0:
        log.warning("resection_weight: no voxel above %.0f HU, weight map is all zero", tau_hu)
        return ResectionWeight(np.zeros_like(x_d5, dtype=np.float64), sigma, tau_hu, plane, True)
    return ResectionWeight(w / peak, sigma, tau_hu, plane)


def loss_img(x_pred_y1, x_y1, W):
    """``mean((W * (x_pred - x_y1))**2)``; gradient ``2 W^2 diff / N``."""
    check_same_shape(x_pred_y1, x_y1, W)
    diff = x_pred_y1 - x_y1
    w2 = W**2
    return float(np.mean(w2 * diff**2)), 2.0 * w2 * diff / diff.size


def loss_total(parts, weights):
    """``L_RF + lambda_img * L_img + lambda_lyap * L_Lyap``.

    ``parts`` maps term names (``rf``, ``img``, ``lyap``) to values; missing
    terms count as zero.
    """
    coef = {"rf": 1.0, "img": weights.lambda_img, "lyap": weights.lambda_lyap}
    total = 0.0
    for name, value in parts.items():
        if name not in coef:
            raise KeyError(f"unknown loss term {name!r}")
        if not math.isfinite(value):
            raise LossError(f"loss term {name!r} is not finite ({value})")
        total += coef[name] * value
    return total
