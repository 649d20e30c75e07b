"""Synthetic Day-5 / Year-1 ROI pairs and paired augmentation.

A phantom is a bone bar along axis 0 cut at the central plane: two textured
segments (cortical shell around a marrow core) separated by a soft-tissue gap.
Year-1 is the Day-5 anatomy warped by a random smooth SVF, plus bridging callus
(union: the whole interface, partial: at most half of it) or, for nonunion, a
wider gap.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .diffeo import exp_svf, random_smooth_svf
from .losses import PlaneSpec
from .volume import Stencil, identity_grid, warp, window, write_vol

log = logging.getLogger(__name__)

GENERATOR_VERSION = "phantom-2"
OUTCOMES = ("union", "partial", "nonunion")
VARIANTS_PER_PAIR = 41

# gap width range (mm) per outcome: wider gaps heal less often
GAP_MM = {"union": (1.0, 2.0), "partial": (2.0, 3.0), "nonunion": (3.0, 4.0)}


class PhantomError(ValueError):
    pass


@dataclass
class PhantomSpec:
    n: int = 24
    spacing_mm: float = 0.5
    outcome: str = "union"
    gap_mm: float = 1.5
    segment_radius_mm: float = 3.0
    cortex_mm: float = 1.0
    cortical_hu: float = 900.0
    marrow_hu: float = 250.0
    callus_hu: float = 600.0
    soft_hu: float = 40.0
    deform_svf_scale: float = 1.5
    widen_vox: float = 3.0
    offset_vox: tuple = (0.0, 0.0)
    texture_seed: int = 0

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise PhantomError(f"unknown outcome {self.outcome!r}")
        if not self.callus_hu < 1000.0:
            raise PhantomError("callus must stay below 1000 HU")
        r = self.segment_radius_mm / self.spacing_mm
        half = self.n / 2.0
        if r + max(abs(o) for o in self.offset_vox) + 1.0 > half:
            raise PhantomError("bone cross-section does not fit inside the ROI")
        gap = self.gap_mm / self.spacing_mm + self.widen_vox
        if gap + 4.0 > self.n:
            raise PhantomError("gap does not fit inside the ROI")
        if r <= self.cortex_mm / self.spacing_mm:
            raise PhantomError("cortex thicker than the segment radius")


@dataclass
class PairedSample:
    x_d5: np.ndarray
    x_y1: np.ndarray
    truth_svf: np.ndarray = None
    outcome: str = "union"
    plane: PlaneSpec = None
    provenance: str = "original"

    @property
    def augmented(self):
        return self.provenance != "original"


def sample_phantom_spec(rng, outcome, n=24, spacing_mm=0.5, deform_svf_scale=1.5):
    """Draw a PhantomSpec for ``outcome`` with randomized anatomy."""
    lo, hi = GAP_MM[outcome]
    return PhantomSpec(
        n=n,
        spacing_mm=spacing_mm,
        outcome=outcome,
        gap_mm=float(rng.uniform(lo, hi)),
        segment_radius_mm=float(rng.uniform(2.6, 3.4)) * n / 24.0 * spacing_mm / 0.5,
        cortical_hu=float(rng.uniform(750.0, 1050.0)),
        marrow_hu=float(rng.uniform(150.0, 350.0)),
        callus_hu=float(rng.uniform(450.0, 850.0)),
        soft_hu=float(rng.uniform(20.0, 60.0)),
        deform_svf_scale=deform_svf_scale,
        offset_vox=tuple(float(o) for o in rng.uniform(-1.5, 1.5, 2)),
        texture_seed=int(rng.integers(2**31)),
    )


def _ramp(x):
    # anti-aliased indicator of x > 0 over one voxel
    return np.clip(x + 0.5, 0.0, 1.0)


def _texture(rng, shape, sigma, amplitude):
    t = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return t * (amplitude / max(t.std(), 1e-12))


class _Anatomy:
    def __init__(self, spec):
        self.spec = spec
        n = spec.n
        shape = (n, n, n)
        rng = np.random.default_rng(spec.texture_seed)
        self.grid = identity_grid(shape)
        self.center = (n - 1) / 2.0
        self.radius = spec.segment_radius_mm / spec.spacing_mm
        self.cortex = spec.cortex_mm / spec.spacing_mm
        # graft segment (i > plane) is slightly offset and resized relative to host
        self.graft_shift = rng.uniform(-0.7, 0.7, 2)
        self.graft_scale = rng.uniform(0.9, 1.1)
        self.soft = spec.soft_hu + _texture(rng, shape, 1.5, 12.0)
        self.cort = spec.cortical_hu + _texture(rng, shape, 1.0, 45.0)
        self.marrow = spec.marrow_hu + _texture(rng, shape, 1.2, 35.0)
        self.callus = spec.callus_hu + _texture(rng, shape, 1.0, 60.0)
        self.partial_angle = rng.uniform(0, 2 * np.pi)
        self.partial_cover = rng.uniform(0.3, 0.5)

    def radial(self):
        i, j, k = self.grid
        oy, oz = self.spec.offset_vox
        graft = i > self.center
        cy = self.center + oy + np.where(graft, self.graft_shift[0], 0.0)
        cz = self.center + oz + np.where(graft, self.graft_shift[1], 0.0)
        r = self.radius * np.where(graft, self.graft_scale, 1.0)
        rho = np.sqrt((j - cy) ** 2 + (k - cz) ** 2)
        return rho, r

    def image(self, gap_vox):
        i = self.grid[0]
        rho, r = self.radial()
        along = _ramp(np.abs(i - self.center) - gap_vox / 2.0)
        bone = _ramp(r - rho) * along
        marrow = _ramp(r - self.cortex - rho) * along
        return self.soft + bone * (self.cort - self.soft) + marrow * (self.marrow - self.cort)

    def callus_mask(self, gap_vox, outcome):
        if outcome == "nonunion":
            return np.zeros(self.grid.shape[1:])
        i, j, k = self.grid
        rho, r = self.radial()
        oy, oz = self.spec.offset_vox
        mask = _ramp(gap_vox / 2.0 + 1.0 - np.abs(i - self.center)) * _ramp(r + 0.7 - rho)
        if outcome == "partial":
            # half-plane cut through the bar axis, keeping ``partial_cover`` of the section
            u = (j - self.center - oy) * np.cos(self.partial_angle) + (
                k - self.center - oz
            ) * np.sin(self.partial_angle)
            frac = self.partial_cover
            # offset of the chord that leaves ``frac`` of a disc of radius R on one side
            offset = _chord_offset(frac) * self.radius
            mask = mask * _ramp(u - offset)
        return mask


def _chord_offset(frac):
    # solve area fraction of a unit-disc segment {u > d} equal to frac
    lo, hi = -1.0, 1.0
    for _ in range(60):
        d = 0.5 * (lo + hi)
        area = (np.arccos(d) - d * np.sqrt(1 - d * d)) / np.pi
        if area > frac:
            lo = d
        else:
            hi = d
    return 0.5 * (lo + hi)


def generate_pair(spec, rng):
    """Build one original Day-5 / Year-1 pair."""
    anat = _Anatomy(spec)
    gap = spec.gap_mm / spec.spacing_mm
    x_d5 = window(anat.image(gap))
    y1_gap = gap + (spec.widen_vox if spec.outcome == "nonunion" else 0.0)
    base_y1 = window(anat.image(y1_gap))
    shape = x_d5.shape
    scale = spec.deform_svf_scale * rng.uniform(0.5, 1.0) if spec.deform_svf_scale > 0 else 0.0
    svf = random_smooth_svf(shape, scale, rng, smooth_sigma=4.0)
    disp = exp_svf(svf, 1.0)
    x_y1 = warp(base_y1, disp)
    callus = warp(anat.callus_mask(gap, spec.outcome), disp)
    if callus.any():
        callus_hu = warp(np.minimum(anat.callus, 990.0), disp)
        # callus replaces soft tissue but never darkens existing bone
        x_y1 = np.where(callus > 0, np.maximum(x_y1, x_y1 + callus * (callus_hu - x_y1)), x_y1)
    x_y1 = window(x_y1)
    return PairedSample(
        x_d5=x_d5,
        x_y1=x_y1,
        truth_svf=svf,
        outcome=spec.outcome,
        plane=PlaneSpec.axis_aligned(shape),
        provenance="original",
    )


# -- augmentation ---------------------------------------------------------


@dataclass
class AugmentSpec:
    """Geometric parameters shared by both volumes; intensity ones per volume (d5, y1)."""

    mirror: bool = False
    rot_deg: tuple = (0.0, 0.0, 0.0)
    shift_vox: tuple = (0, 0, 0)
    noise_hu: tuple = (0.0, 0.0)
    brightness_hu: tuple = (0.0, 0.0)
    contrast_frac: tuple = (0.0, 0.0)
    blur_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if any(abs(a) > 10.0 for a in self.rot_deg):
            raise ValueError("rotations are limited to 10 degrees")
        if any(abs(s) > 2 for s in self.shift_vox):
            raise ValueError("shifts are limited to 2 voxels")
        if any(not (s == 0 or 10.0 <= s <= 25.0) for s in self.noise_hu):
            raise ValueError("noise sigma must be 0 or within [10, 25] HU")
        if any(abs(b) > 30.0 for b in self.brightness_hu):
            raise ValueError("brightness shift limited to 30 HU")
        if any(abs(c) > 0.03 for c in self.contrast_frac):
            raise ValueError("contrast change limited to 3%")
        if self.blur_sigma not in (0.0, 0.8):
            raise ValueError("blur sigma must be 0 or 0.8")


def sample_augment_spec(rng):
    """Random AugmentSpec; intensity draws are independent between the two volumes."""
    return AugmentSpec(
        mirror=bool(rng.random() < 0.5),
        rot_deg=tuple(float(a) for a in rng.uniform(-10.0, 10.0, 3)),
        shift_vox=tuple(int(s) for s in rng.integers(-2, 3, 3)),
        noise_hu=tuple(float(s) for s in rng.uniform(10.0, 25.0, 2)),
        brightness_hu=tuple(float(b) for b in rng.uniform(-30.0, 30.0, 2)),
        contrast_frac=tuple(float(c) for c in rng.uniform(-0.03, 0.03, 2)),
        blur_sigma=0.8 if rng.random() < 0.5 else 0.0,
        seed=int(rng.integers(2**31)),
    )


def _rotation(rot_deg):
    ax, ay, az = np.deg2rad(rot_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


class GeometricTransform:
    """Mirror (axis 0) -> rotate about the grid center -> integer shift."""

    def __init__(self, shape, mirror=False, rot_deg=(0.0, 0.0, 0.0), shift_vox=(0, 0, 0)):
        self.shape = tuple(shape)
        self.mirror = mirror
        self.R = np.eye(3) if not any(rot_deg) else _rotation(rot_deg)
        self.shift = np.asarray(shift_vox, dtype=np.float64)
        self.center = (np.asarray(self.shape, dtype=np.float64) - 1.0) / 2.0
        self.M = np.diag([-1.0 if mirror else 1.0, 1.0, 1.0])

    def forward_point(self, p):
        """Map a source coordinate to its output location."""
        q = self.M @ (np.asarray(p, dtype=np.float64) - self.center)
        return self.R @ q + self.center + self.shift

    def apply(self, vol):
        grid = identity_grid(self.shape).reshape(3, -1)
        q = grid - (self.center + self.shift)[:, None]
        src = self.M @ (self.R.T @ q) + self.center[:, None]
        return Stencil(self.shape, src.reshape((3,) + self.shape)).sample(vol)

    def plane(self, plane):
        normal = self.R @ (self.M @ np.asarray(plane.normal, dtype=np.float64))
        return PlaneSpec(tuple(self.forward_point(plane.point)), tuple(normal))

    @property
    def identity(self):
        return not self.mirror and np.array_equal(self.R, np.eye(3)) and not self.shift.any()


def _intensity(vol, noise, brightness, contrast, blur, rng):
    out = vol
    if blur > 0:
        out = gaussian_filter(out, blur, mode="nearest")
    if contrast or brightness:
        out = out * (1.0 + contrast) + brightness
    if noise > 0:
        out = out + rng.normal(0.0, noise, out.shape)
    return window(out) if out is not vol else out.copy()


def augment_pair(pair, spec, variant_id=1):
    """Apply one AugmentSpec to an original pair (same geometry on both volumes)."""
    if pair.augmented:
        raise ValueError("cannot augment an already augmented pair")
    geo = GeometricTransform(pair.x_d5.shape, spec.mirror, spec.rot_deg, spec.shift_vox)
    d5 = pair.x_d5 if geo.identity else geo.apply(pair.x_d5)
    y1 = pair.x_y1 if geo.identity else geo.apply(pair.x_y1)
    rng = np.random.default_rng(spec.seed)
    rng_d5, rng_y1 = (np.random.default_rng(s) for s in rng.bit_generator.seed_seq.spawn(2))
    d5 = _intensity(d5, spec.noise_hu[0], spec.brightness_hu[0], spec.contrast_frac[0], spec.blur_sigma, rng_d5)
    y1 = _intensity(y1, spec.noise_hu[1], spec.brightness_hu[1], spec.contrast_frac[1], spec.blur_sigma, rng_y1)
    plane = pair.plane or PlaneSpec.axis_aligned(pair.x_d5.shape)
    return replace(
        pair,
        x_d5=d5,
        x_y1=y1,
        truth_svf=None,
        plane=plane if geo.identity else geo.plane(plane),
        provenance=f"aug{variant_id:03d}",
    )


# -- corpus ---------------------------------------------------------------


def outcome_counts(n_base, mix):
    """Largest-remainder allocation of ``n_base`` phantoms to outcome classes."""
    mix = np.asarray(mix, dtype=np.float64)
    mix = mix / mix.sum()
    raw = mix * n_base
    counts = np.floor(raw).astype(int)
    for idx in np.argsort(-(raw - counts), kind="stable")[: n_base - counts.sum()]:
        counts[idx] += 1
    return dict(zip(OUTCOMES, counts.tolist()))


def split_phantoms(ids, rng, fractions=(0.7, 0.15, 0.15)):
    """Phantom-level train/val/test assignment."""
    ids = list(ids)
    order = rng.permutation(len(ids))
    n_test = max(1, int(round(fractions[2] * len(ids))))
    n_val = max(1, int(round(fractions[1] * len(ids))))
    split = {}
    for rank, idx in enumerate(order):
        split[ids[idx]] = "test" if rank < n_test else "val" if rank < n_test + n_val else "train"
    return split


@dataclass
class Manifest:
    phantoms: list = field(default_factory=list)
    seed: int = 0
    generator_version: str = GENERATOR_VERSION
    shape: int = 24

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))

    def ids(self, split=None):
        return [p["id"] for p in self.phantoms if split is None or p["split"] == split]

    def resplit(self, seed, fractions=(0.7, 0.15, 0.15)):
        """Copy of the manifest with a fresh seeded phantom-level split."""
        split = split_phantoms(self.ids(), np.random.default_rng(seed), fractions)
        phantoms = [dict(p, split=split[p["id"]]) for p in self.phantoms]
        return replace(self, phantoms=phantoms)


def plane_to_dict(plane):
    return {"point": list(plane.point), "normal": list(plane.normal)}


def plane_from_dict(d):
    return PlaneSpec(tuple(d["point"]), tuple(d["normal"]))


def build_corpus(
    n_base,
    mix=(0.6, 0.2, 0.2),
    out_dir="corpus",
    variants_per_pair=VARIANTS_PER_PAIR,
    seed=0,
    n=24,
    deform_svf_scale=1.5,
    fractions=(0.7, 0.15, 0.15),
):
    """Generate ``n_base`` phantoms with ``variants_per_pair - 1`` augmentations each.

    Layout: ``<out_dir>/<phantom_id>/<variant_id>_{d5,y1}.vol`` plus ``manifest.json``.
    """
    if n_base < 4:
        raise ValueError("n_base must be >= 4")
    if variants_per_pair < 1:
        raise ValueError("variants_per_pair must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"{out_dir} is not writable")
    master = np.random.SeedSequence(seed)
    label_rng = np.random.default_rng(master.spawn(1)[0])
    counts = outcome_counts(n_base, mix)
    labels = [o for o in OUTCOMES for _ in range(counts[o])]
    labels = [labels[i] for i in label_rng.permutation(n_base)]
    streams = master.spawn(n_base)
    manifest = Manifest(seed=seed, shape=n)
    for idx, (outcome, stream) in enumerate(zip(labels, streams)):
        pid = f"p{idx:03d}"
        rng = np.random.default_rng(stream)
        spec = sample_phantom_spec(rng, outcome, n=n, deform_svf_scale=deform_svf_scale)
        pair = generate_pair(spec, rng)
        pdir = os.path.join(out_dir, pid)
        os.makedirs(pdir, exist_ok=True)
        variants = []
        for v in range(variants_per_pair):
            sample = pair if v == 0 else augment_pair(pair, sample_augment_spec(rng), v)
            vid = f"{v:03d}"
            write_vol(os.path.join(pdir, f"{vid}_d5.vol"), sample.x_d5)
            write_vol(os.path.join(pdir, f"{vid}_y1.vol"), sample.x_y1)
            variants.append({"id": vid, "plane": plane_to_dict(sample.plane), "provenance": sample.provenance})
        write_vol(os.path.join(pdir, "000_svf.vol"), pair.truth_svf, role="svf")
        manifest.phantoms.append(
            {"id": pid, "outcome": outcome, "variants": variants, "split": None, "spec": asdict(spec)}
        )
    split = split_phantoms(manifest.ids(), np.random.default_rng(master.spawn(1)[0]), fractions)
    for p in manifest.phantoms:
        p["split"] = split[p["id"]]
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest


def load_variant(corpus_dir, phantom, variant):
    """``PairedSample`` for a manifest phantom entry and variant entry."""
    from .volume import read_vol

    pdir = os.path.join(corpus_dir, phantom["id"])
    d5, _ = read_vol(os.path.join(pdir, f"{variant['id']}_d5.vol"))
    y1, _ = read_vol(os.path.join(pdir, f"{variant['id']}_y1.vol"))
    return PairedSample(
        x_d5=d5,
        x_y1=y1,
        outcome=phantom["outcome"],
        plane=plane_from_dict(variant["plane"]),
        provenance=variant.get("provenance", "original"),
    )
