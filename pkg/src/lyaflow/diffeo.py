"""Stationary velocity fields: scaling-and-squaring exponential and the teacher trajectory."""

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import (
    Stencil,
    check_vector_field,
    finite_velocity,
    identity_grid,
    read_vol,
    spatial_gradient,
    warp,
    write_vol,
)

MIN_SQUARING_STEPS = 4


def max_norm(field):
    return float(np.sqrt((field**2).sum(axis=0)).max()) if field.size else 0.0


def squaring_steps(svf, t=1.0):
    """Smallest K >= 4 with ``2**-K * t * max|v| < 0.5`` voxel."""
    m = abs(t) * max_norm(svf)
    k = MIN_SQUARING_STEPS
    while m / 2.0**k >= 0.5:
        k += 1
    return k


def compose(d, e):
    """Displacement of the pull composition: ``d(w) + e(w + d(w))``.

    Warping an image by the result equals ``warp(warp(img, e), d)``.
    """
    st = Stencil(d.shape[1:], identity_grid(d.shape[1:]) + d)
    return d + np.stack([st.sample(e[a]) for a in range(3)])


def exp_svf(svf, t=1.0, K=None, return_stack=False):
    """Displacement field of ``exp(t * svf)`` by scaling and squaring.

    With ``return_stack=True`` also returns the list of intermediate displacements
    ``[d_0, ..., d_K]`` (needed for reverse-mode differentiation).
    """
    check_vector_field(svf)
    if K is None:
        K = squaring_steps(svf)
    d = svf * (t / 2.0**K)
    stack = [d]
    for _ in range(K):
        d = compose(d, d)
        stack.append(d)
    return (d, stack) if return_stack else d


def jacobian_positivity(disp):
    """Fraction of voxels where ``det(I + grad disp) > 0``."""
    jac = spatial_gradient(disp) + np.eye(3)
    return float(np.mean(np.linalg.det(jac) > 0))


def random_smooth_svf(shape, max_disp, rng, smooth_sigma=3.0):
    """Gaussian-smoothed white-noise vector field rescaled to ``max|v| = max_disp``."""
    noise = rng.standard_normal((3,) + tuple(shape))
    field = np.stack([gaussian_filter(noise[a], smooth_sigma, mode="nearest") for a in range(3)])
    m = max_norm(field)
    if m == 0 or max_disp == 0:
        return np.zeros_like(field)
    return field * (max_disp / m)


@dataclass
class TeacherTrajectory:
    """Warp path ``x*_t = base o exp(t v)`` and its finite-difference tangent."""

    svf: np.ndarray
    base: np.ndarray
    dt_fd: float = 0.05
    squaring_steps: int = None

    def __post_init__(self):
        check_vector_field(self.svf)
        if self.dt_fd <= 0:
            raise ValueError("dt_fd must be positive")
        if self.squaring_steps is None:
            self.squaring_steps = squaring_steps(self.svf)
        if self.squaring_steps < 0:
            raise ValueError("squaring_steps must be >= 0")

    def state(self, t):
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t={t} outside [0, 1]")
        if t == 0.0:
            return self.base.copy()
        return warp(self.base, exp_svf(self.svf, t, self.squaring_steps))

    def tangent(self, t):
        """Forward difference; backward difference once ``t + dt`` would pass 1."""
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t={t} outside [0, 1]")
        lo, hi = t, t + self.dt_fd
        if hi > 1.0 + 1e-12:
            lo, hi = t - self.dt_fd, t
        return finite_velocity(self.state(lo), self.state(min(hi, 1.0)), self.dt_fd)

    def state_and_tangent(self, t):
        """``(x*_t, xdot*_t)`` sharing the warp at ``t``."""
        x = self.state(t)
        if t + self.dt_fd <= 1.0 + 1e-12:
            return x, finite_velocity(x, self.state(min(t + self.dt_fd, 1.0)), self.dt_fd)
        return x, finite_velocity(self.state(t - self.dt_fd), x, self.dt_fd)

    def save(self, svf_path, base_path):
        write_vol(svf_path, self.svf, role="svf")
        sidecar = {
            "dt_fd": self.dt_fd,
            "squaring_steps": self.squaring_steps,
            "base_volume_path": os.fspath(base_path),
        }
        with open(os.fspath(svf_path) + ".json", "w") as fh:
            json.dump(sidecar, fh, indent=2)

    @classmethod
    def load(cls, svf_path, base=None):
        svf, header = read_vol(svf_path)
        if header["role"] != "svf":
            raise ValueError(f"{svf_path}: role {header['role']!r}, expected 'svf'")
        with open(os.fspath(svf_path) + ".json") as fh:
            sidecar = json.load(fh)
        if base is None:
            base, _ = read_vol(sidecar["base_volume_path"])
        return cls(svf, base, sidecar["dt_fd"], sidecar["squaring_steps"])
