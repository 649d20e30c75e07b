"""3D scalar/vector grids: trilinear sampling, backward warping, finite differences, .vol I/O.

Volumes are plain ``float64`` arrays of shape ``(nx, ny, nz)`` indexed ``[i, j, k]``.
Vector fields (SVFs, displacements) are arrays of shape ``(3, nx, ny, nz)`` in voxel
units.  Image-space velocities are scalar volumes (HU per unit transport time).

Sampling outside the grid clamps to the boundary face.
"""

import json
import os

import numpy as np

HU_MIN = -100.0
HU_MAX = 1100.0

VOL_MAGIC = "OFVOL1"
ROLES = ("image", "velocity", "weight", "displacement", "svf")


class ShapeError(ValueError):
    pass


def window(vol):
    """Clip intensities to the [-100, 1100] HU window."""
    return np.clip(vol, HU_MIN, HU_MAX)


def identity_grid(shape):
    """Voxel-center coordinates, shape ``(3, *shape)``."""
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"))


def _axis_terms(p, n):
    pc = np.clip(p, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(pc).astype(np.intp), n - 2)
    f = pc - i0
    # clamped coordinates have zero derivative
    live = (p > 0.0) & (p < n - 1.0)
    return i0, f, live


class Stencil:
    """Precomputed trilinear corner indices/weights for a set of sample points.

    ``points`` has shape ``(3, ...)`` in voxel coordinates.  One stencil can be
    reused to sample several fields on the same grid, to scatter adjoints back
    onto the grid, and to differentiate the interpolant w.r.t. the points.
    """

    def __init__(self, grid_shape, points):
        nx, ny, nz = grid_shape
        if min(grid_shape) < 2:
            raise ShapeError(f"grid too small for trilinear sampling: {grid_shape}")
        self.grid_shape = tuple(grid_shape)
        self.out_shape = points.shape[1:]
        (ix, fx, lx), (iy, fy, ly), (iz, fz, lz) = (
            _axis_terms(points[a].ravel(), n) for a, n in enumerate(grid_shape)
        )
        self.f = (fx, fy, fz)
        self.live = (lx, ly, lz)
        base = (ix * ny + iy) * nz + iz
        self._cache = {}
        self.index = []
        self.corner = []
        for cx in (0, 1):
            for cy in (0, 1):
                for cz in (0, 1):
                    self.index.append(base + (cx * ny + cy) * nz + cz)
                    self.corner.append((cx, cy, cz))

    def _weights(self, deriv=None):
        cached = self._cache.get(deriv)
        if cached is not None:
            return cached
        fx, fy, fz = self.f
        out = []
        for cx, cy, cz in self.corner:
            terms = []
            for axis, (c, f) in enumerate(zip((cx, cy, cz), (fx, fy, fz))):
                if axis == deriv:
                    terms.append(np.where(self.live[axis], 1.0 if c else -1.0, 0.0))
                else:
                    terms.append(f if c else 1.0 - f)
            out.append(terms[0] * terms[1] * terms[2])
        self._cache[deriv] = out
        return out

    def sample(self, field):
        flat = field.ravel()
        acc = np.zeros(self.index[0].shape)
        for idx, w in zip(self.index, self._weights()):
            acc += flat[idx] * w
        return acc.reshape(self.out_shape)

    def point_gradient(self, field):
        """d(sample)/d(point), shape ``(3, *out_shape)``; zero on clamped axes.

        On a grid plane the interpolant has a kink; there the central (average of
        the one-sided) derivative is returned, which keeps the result mirror
        symmetric and equal to a central finite difference.
        """
        flat = field.ravel()
        grads = []
        for axis in range(3):
            acc = np.zeros(self.index[0].shape)
            for idx, w in zip(self.index, self._weights(deriv=axis)):
                acc += flat[idx] * w
            kink = np.flatnonzero(self.live[axis] & (self.f[axis] == 0.0))
            if kink.size:
                acc[kink] = 0.5 * (acc[kink] + self._backward_slope(flat, axis, kink))
            grads.append(acc.reshape(self.out_shape))
        return np.stack(grads)

    def _backward_slope(self, flat, axis, sel):
        # value at the kink minus value one voxel back along ``axis``
        stride = (self.grid_shape[1] * self.grid_shape[2], self.grid_shape[2], 1)[axis]
        out = np.zeros(sel.size)
        for idx, w, corner in zip(self.index, self._weights(), self.corner):
            if corner[axis]:
                continue
            # with f == 0 only the lower corners along ``axis`` carry weight
            out += (flat[idx[sel]] - flat[idx[sel] - stride]) * w[sel]
        return out

    def scatter(self, values):
        """Adjoint of :meth:`sample`: spread ``values`` back onto the grid."""
        n = int(np.prod(self.grid_shape))
        v = values.ravel()
        acc = np.zeros(n)
        for idx, w in zip(self.index, self._weights()):
            acc += np.bincount(idx, weights=v * w, minlength=n)
        return acc.reshape(self.grid_shape)


def sample_trilinear(vol, p):
    """Trilinear value of ``vol`` at continuous voxel coordinate(s) ``p``.

    ``p`` is a 3-sequence or an array of shape ``(3, ...)``.
    """
    pts = np.asarray(p, dtype=np.float64)
    scalar = pts.ndim == 1
    if scalar:
        pts = pts.reshape(3, 1)
    out = Stencil(vol.shape, pts).sample(np.asarray(vol, dtype=np.float64))
    return float(out[0]) if scalar else out


def check_same_shape(*arrays):
    first = arrays[0].shape[-3:]
    for a in arrays[1:]:
        if a.shape[-3:] != first:
            raise ShapeError(f"shape mismatch: {first} vs {a.shape[-3:]}")


def check_vector_field(field):
    if field.ndim != 4 or field.shape[0] != 3:
        raise ShapeError(f"expected a (3, nx, ny, nz) vector field, got {field.shape}")


def warp(vol, disp):
    """Backward warp: ``out(w) = vol(w + disp(w))``."""
    check_vector_field(disp)
    check_same_shape(vol, disp)
    if not np.any(disp):
        return np.array(vol, dtype=np.float64, copy=True)
    return Stencil(vol.shape, identity_grid(vol.shape) + disp).sample(vol)


def spatial_gradient(field):
    """Per-voxel Jacobian ``J[..., a, b] = d field_a / d x_b`` (units per voxel).

    Central differences in the interior, one-sided at the faces.
    """
    check_vector_field(field)
    if min(field.shape[1:]) < 3:
        raise ShapeError(f"grid too small for finite differences: {field.shape[1:]}")
    jac = np.empty(field.shape[1:] + (3, 3))
    for a in range(3):
        for b, g in enumerate(np.gradient(field[a], axis=(0, 1, 2))):
            jac[..., a, b] = g
    return jac


def finite_velocity(a, b, dt):
    """Image-space velocity ``(b - a) / dt``."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    check_same_shape(a, b)
    return (np.asarray(b, dtype=np.float64) - a) / dt


def write_vol(path, data, role="image", spacing_mm=0.5):
    """Write a volume or vector field to the ``.vol`` format (f32, k fastest)."""
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    data = np.asarray(data)
    if data.ndim == 4:
        check_vector_field(data)
        nx, ny, nz = data.shape[1:]
        dtype = "f32x3"
        payload = np.moveaxis(data, 0, -1)
    elif data.ndim == 3:
        nx, ny, nz = data.shape
        dtype = "f32"
        payload = data
    else:
        raise ShapeError(f"cannot store array of shape {data.shape}")
    if not np.all(np.isfinite(payload)):
        raise ValueError("refusing to write non-finite values")
    header = {
        "magic": VOL_MAGIC,
        "nx": int(nx),
        "ny": int(ny),
        "nz": int(nz),
        "spacing_mm": float(spacing_mm),
        "dtype": dtype,
        "role": role,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def read_vol(path):
    """Read a ``.vol`` file; returns ``(float64 array, header dict)``."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        raw = fh.read()
    if header.get("magic") != VOL_MAGIC:
        raise ValueError(f"{os.fspath(path)}: not a {VOL_MAGIC} file")
    shape = (header["nx"], header["ny"], header["nz"])
    arr = np.frombuffer(raw, dtype="<f4")
    if header["dtype"] == "f32x3":
        data = np.moveaxis(arr.reshape(shape + (3,)), -1, 0)
    elif header["dtype"] == "f32":
        data = arr.reshape(shape)
    else:
        raise ValueError(f"unsupported dtype {header['dtype']!r}")
    return data.astype(np.float64), header
