"""Fixed-step integration of ``dx/dt = v(x, t)`` over transport time [0, 1]."""

import math
from dataclasses import dataclass

import numpy as np

from .volume import window


class NumericError(ArithmeticError):
    pass


SOLVERS = ("euler", "rk4")


def n_steps(step):
    n = round(1.0 / step)
    if step <= 0 or abs(n * step - 1.0) > 1e-9:
        raise ValueError(f"step {step} does not divide [0, 1] evenly")
    return n


def net_field(net, x_d5):
    """Wrap a student network as ``v(x, t)`` conditioned on ``x_d5``."""
    return lambda x, t: net.forward(x, t, x_d5)


@dataclass(frozen=True)
class RolloutResult:
    states: tuple
    solver: str
    step: float

    @property
    def times(self):
        return np.arange(len(self.states)) * self.step


def _check(x, t):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite state at t={t:.4f}")


def rk4_step(field, x, t, h):
    k1 = field(x, t)
    k2 = field(x + 0.5 * h * k1, t + 0.5 * h)
    k3 = field(x + 0.5 * h * k2, t + 0.5 * h)
    k4 = field(x + h * k3, min(t + h, 1.0))
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rollout(field, x0, solver="euler", step=0.1):
    """Integrate from t=0 to 1 keeping every grid state.

    ``field`` is a callable ``(x, t) -> velocity``; use :func:`net_field` for a
    student network.
    """
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}")
    n = n_steps(step)
    x = np.array(x0, dtype=np.float64, copy=True)
    states = [x.copy()]
    for i in range(n):
        t = i * step
        if solver == "euler":
            x = x + step * field(x, t)
        else:
            x = rk4_step(field, x, t, step)
        _check(x, (i + 1) * step)
        states.append(x)
    return RolloutResult(tuple(states), solver, step)


def infer(net, x_d5, step=0.1, solver="rk4"):
    """Year-1 prediction: integrate the student from ``x_d5``, clamp to the HU window."""
    return window(rollout(net_field(net, x_d5), x_d5, solver, step).states[-1])


def snap_index(t, step):
    """Nearest grid index to ``t``; ties round up."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    return min(int(math.floor(t / step + 0.5 + 1e-9)), n_steps(step))


def state_at(result, t):
    """``(state, snapped_t)`` at the rollout grid time nearest ``t``."""
    i = snap_index(t, result.step)
    return result.states[i], i * result.step
