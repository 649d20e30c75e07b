"""Evaluation metrics: bone Dice, 3D MS-SSIM and MAE over the full ROI and the mid slab.

Configuration recorded in every report header (see ``METRIC_CONFIG``):
bone threshold 300 HU, bone MAE masked on the ground-truth volume, MS-SSIM with a
7-voxel Gaussian window (sigma 1.5), data range 1200 HU, up to 3 dyadic scales.
"""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .volume import HU_MAX, HU_MIN, check_same_shape

log = logging.getLogger(__name__)

BONE_HU = 300.0
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
DATA_RANGE = HU_MAX - HU_MIN
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_MAX_SCALES = 3

METRIC_CONFIG = {
    "bone_threshold_hu": BONE_HU,
    "bone_mae_mask": "truth",
    "msssim_window": SSIM_WINDOW,
    "msssim_sigma": SSIM_SIGMA,
    "msssim_data_range": DATA_RANGE,
    "msssim_max_scales": MSSSIM_MAX_SCALES,
    "empty_dice": 100.0,
    "slab_half_width": 6,
}


@dataclass(frozen=True)
class SlabSpec:
    """Slices ``[center - half_width, center + half_width)`` along ``axis``.

    ``center`` is the continuous plane position; for a 24-voxel axis with the
    plane at 11.5 the slab is slices 6..17.
    """

    axis: int = 0
    center: float = 11.5
    half_width: int = 6

    @classmethod
    def central(cls, n, axis=0, half_width=6):
        return cls(axis, (n - 1) / 2.0, half_width)

    def bounds(self, n):
        lo = int(math.floor(self.center + 0.5)) - self.half_width
        hi = lo + 2 * self.half_width
        if lo < 0 or hi > n:
            raise ValueError(f"slab [{lo}, {hi}) does not fit an axis of {n}")
        return lo, hi

    def mask(self, shape):
        lo, hi = self.bounds(shape[self.axis])
        m = np.zeros(shape, dtype=bool)
        sl = [slice(None)] * 3
        sl[self.axis] = slice(lo, hi)
        m[tuple(sl)] = True
        return m

    def crop(self, vol):
        lo, hi = self.bounds(vol.shape[self.axis])
        sl = [slice(None)] * 3
        sl[self.axis] = slice(lo, hi)
        return vol[tuple(sl)]


def _region(shape, region):
    if region is None:
        return np.ones(shape, dtype=bool)
    if isinstance(region, SlabSpec):
        return region.mask(shape)
    return np.asarray(region, dtype=bool)


def dice_bone(pred, truth, tau=BONE_HU, region=None):
    """Dice (percent) of the ``> tau`` masks inside ``region``; 100 when both are empty."""
    check_same_shape(pred, truth)
    r = _region(pred.shape, region)
    a = (pred > tau) & r
    b = (truth > tau) & r
    denom = a.sum() + b.sum()
    if denom == 0:
        log.warning("dice_bone: both bone masks empty, reporting 100")
        return 100.0
    return 100.0 * 2.0 * (a & b).sum() / denom


def mae(pred, truth, region=None, bone_only=False, tau=BONE_HU):
    """Mean absolute error in HU; ``bone_only`` restricts to ``truth > tau``.

    An empty bone set yields NaN (logged).
    """
    check_same_shape(pred, truth)
    r = _region(pred.shape, region)
    if bone_only:
        r = r & (truth > tau)
    if not r.any():
        log.warning("mae: empty evaluation region, reporting NaN")
        return math.nan
    return float(np.abs(pred - truth)[r].mean())


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(vol, g):
    out = vol
    for axis in range(3):
        out = convolve1d(out, g, axis=axis, mode="nearest")
    r = len(g) // 2
    return out[r:-r, r:-r, r:-r]


def _ssim_terms(x, y, g):
    c1 = (0.01 * DATA_RANGE) ** 2
    c2 = (0.03 * DATA_RANGE) ** 2
    mx = _filter_valid(x, g)
    my = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return float((lum * cs).mean()), float(cs.mean())


def _downsample(vol):
    s = [n - n % 2 for n in vol.shape]
    v = vol[: s[0], : s[1], : s[2]]
    return v.reshape(s[0] // 2, 2, s[1] // 2, 2, s[2] // 2, 2).mean(axis=(1, 3, 5))


def msssim_scales(shape, window=SSIM_WINDOW, max_scales=MSSSIM_MAX_SCALES):
    n = min(shape)
    scales = 0
    while scales < max_scales and n >= window:
        scales += 1
        n //= 2
    return scales


def msssim_weights(scales):
    w = np.asarray(MSSSIM_WEIGHTS[:scales])
    return w / w.sum()


def msssim3d(pred, truth, max_scales=MSSSIM_MAX_SCALES):
    """3D MS-SSIM in percent.

    Intensities are shifted by the window minimum; per-scale contrast-structure
    means (and the final SSIM) are clipped at 0 before exponentiation.
    """
    check_same_shape(pred, truth)
    scales = msssim_scales(pred.shape, max_scales=max_scales)
    if scales == 0:
        raise ValueError(f"volume {pred.shape} too small for a {SSIM_WINDOW}-voxel SSIM window")
    weights = msssim_weights(scales)
    g = gaussian_window()
    x = np.asarray(pred, dtype=np.float64) - HU_MIN
    y = np.asarray(truth, dtype=np.float64) - HU_MIN
    score = 1.0
    for s in range(scales):
        ssim, cs = _ssim_terms(x, y, g)
        if s == scales - 1:
            score *= max(ssim, 0.0) ** weights[s]
        else:
            score *= max(cs, 0.0) ** weights[s]
            x, y = _downsample(x), _downsample(y)
    return 100.0 * score


@dataclass
class MetricRow:
    mid_dice: float
    mid_msssim: float
    mid_mae_all: float
    mid_mae_bone: float
    full_dice: float
    full_msssim: float
    full_mae_all: float
    full_mae_bone: float

    def as_dict(self):
        return asdict(self)


METRIC_FIELDS = tuple(MetricRow.__dataclass_fields__)


def evaluate_pair(pred, truth, slab=None):
    """All eight metrics; ``slab`` defaults to the central slab along axis 0."""
    check_same_shape(pred, truth)
    if slab is None:
        slab = SlabSpec.central(pred.shape[0])
    return MetricRow(
        mid_dice=dice_bone(pred, truth, region=slab),
        mid_msssim=msssim3d(slab.crop(pred), slab.crop(truth)),
        mid_mae_all=mae(pred, truth, region=slab),
        mid_mae_bone=mae(pred, truth, region=slab, bone_only=True),
        full_dice=dice_bone(pred, truth),
        full_msssim=msssim3d(pred, truth),
        full_mae_all=mae(pred, truth),
        full_mae_bone=mae(pred, truth, bone_only=True),
    )


def summarize(rows):
    """Mean and (population) std per metric over a list of MetricRows."""
    table = np.array([[getattr(r, f) for f in METRIC_FIELDS] for r in rows], dtype=np.float64)
    mean = dict(zip(METRIC_FIELDS, np.nanmean(table, axis=0)))
    std = dict(zip(METRIC_FIELDS, np.nanstd(table, axis=0)))
    return mean, std
