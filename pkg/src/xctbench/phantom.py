"""Synthetic part phantoms with embedded pores and inclusions."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .volume import AIR, INCLUSION, MATERIAL, PORE, LabelVolume, Volume


class PhantomError(ValueError):
    pass


class DensityInfeasibleError(PhantomError):
    def __init__(self, message, achievable):
        super().__init__(f"density infeasible: {message} (achievable maximum {achievable:.4g})")
        self.achievable = achievable


class EmptyPartError(PhantomError):
    pass


@dataclass(frozen=True)
class Cylinder:
    """Cylinder with its axis along z. ``center`` is (y, x); defaults to the grid center."""

    radius: float
    center: tuple | None = None
    z_range: tuple | None = None
    kind: str = "cylinder"

    def mask(self, shape):
        nz, ny, nx = shape
        cy, cx = self.center if self.center is not None else ((ny - 1) / 2, (nx - 1) / 2)
        yy, xx = np.ogrid[:ny, :nx]
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= self.radius ** 2
        z0, z1 = self.z_range if self.z_range is not None else (0, nz)
        out = np.zeros(shape, dtype=bool)
        out[z0:z1] = disk
        return out


@dataclass(frozen=True)
class Box:
    """Axis-aligned box covering voxel index ranges [lo, hi) per axis (z, y, x)."""

    lo: tuple
    hi: tuple
    kind: str = "box"

    def mask(self, shape):
        out = np.zeros(shape, dtype=bool)
        out[tuple(slice(a, b) for a, b in zip(self.lo, self.hi))] = True
        return out


@dataclass(frozen=True)
class Composite:
    """Union of solids."""

    parts: tuple
    kind: str = "composite"

    def mask(self, shape):
        out = np.zeros(shape, dtype=bool)
        for p in self.parts:
            out |= p.mask(shape)
        return out


def shape_from_dict(d):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "cylinder":
        return Cylinder(d["radius"], _tup(d.get("center")), _tup(d.get("z_range")))
    if kind == "box":
        return Box(tuple(d["lo"]), tuple(d["hi"]))
    if kind == "composite":
        return Composite(tuple(shape_from_dict(p) for p in d["parts"]))
    raise PhantomError(f"unknown part shape {kind!r}")


def _tup(v):
    return None if v is None else tuple(v)


@dataclass(frozen=True)
class Flaw:
    """An explicit spheroidal flaw: class id, center (z, y, x) and semi-axes (z, y, x) in voxels."""

    class_id: int
    center: tuple
    semi_axes: tuple


@dataclass(frozen=True)
class PhantomSpec:
    grid_shape: tuple = (32, 64, 64)
    voxel_pitch: float = 17.3
    part_shape: object = None
    mu_material: float = 1.0
    mu_inclusion: float = 2.0
    pore_density_target: float = 0.0
    inclusion_density_target: float = 0.0
    flaw_size_range: tuple = (1.0, 3.0)
    seed: int = 0
    flaws: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.part_shape is None:
            _, ny, nx = self.grid_shape
            object.__setattr__(self, "part_shape", Cylinder(0.4 * min(ny, nx)))
        self.validate()

    def validate(self):
        if len(self.grid_shape) != 3 or any(int(n) <= 0 for n in self.grid_shape):
            raise PhantomError(f"grid_shape must be three positive ints, got {self.grid_shape}")
        if not 0.0 <= self.pore_density_target <= 0.1:
            raise PhantomError(f"pore_density_target {self.pore_density_target} outside [0, 0.1]")
        if not 0.0 <= self.inclusion_density_target <= 0.05:
            raise PhantomError(f"inclusion_density_target {self.inclusion_density_target} outside [0, 0.05]")
        if not self.mu_inclusion > self.mu_material > 0:
            raise PhantomError("attenuation must satisfy mu_inclusion > mu_material > 0")
        lo, hi = self.flaw_size_range
        if lo < 1 or hi < lo:
            raise PhantomError(f"flaw_size_range {self.flaw_size_range} needs 1 <= min <= max")

    def to_dict(self):
        d = asdict(self)
        d["grid_shape"] = list(self.grid_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["grid_shape"] = tuple(d["grid_shape"])
        if d.get("part_shape") is not None:
            d["part_shape"] = shape_from_dict(d["part_shape"])
        d["flaw_size_range"] = tuple(d.get("flaw_size_range", (1.0, 3.0)))
        d["flaws"] = tuple(Flaw(f["class_id"], tuple(f["center"]), tuple(f["semi_axes"]))
                           for f in d.get("flaws", ()))
        return cls(**d)


def rasterize_spheroid(shape, center, semi_axes):
    """Return (slices, local_mask) of voxels whose centers lie inside the spheroid."""
    sl, grids = [], []
    for n, c, a in zip(shape, center, semi_axes):
        lo = max(int(np.floor(c - a)), 0)
        hi = min(int(np.ceil(c + a)) + 1, n)
        sl.append(slice(lo, max(hi, lo)))
        grids.append((np.arange(lo, max(hi, lo)) - c) / a)
    gz, gy, gx = np.meshgrid(*grids, indexing="ij", sparse=True)
    return tuple(sl), gz ** 2 + gy ** 2 + gx ** 2 <= 1.0


def _sample_flaw(rng, shape, bbox_lo, bbox_hi, size_range):
    r = rng.uniform(*size_range)
    q = rng.uniform(0.5, 2.0, size=2)
    g = (q[0] * q[1]) ** (1.0 / 3.0)
    axes = r * np.array([q[0], q[1], 1.0]) / g
    center = rng.uniform(bbox_lo, bbox_hi)
    return center, axes


def _place(labels, allowed, part_count, target, class_id, rng, size_range, max_attempts=200_000):
    """Add flaws of ``class_id`` until the class count first reaches ``target`` voxels.

    Candidates come from ``rng`` independently of ``target`` so a larger target
    places a superset of flaws. At the crossing, the closer of the two counts wins.
    """
    if target <= 0:
        return
    idx = np.argwhere(allowed)
    lo, hi = idx.min(axis=0), idx.max(axis=0) + 1
    count = int((labels == class_id).sum())
    attempts = 0
    while count < target:
        attempts += 1
        if attempts > max_attempts:
            raise DensityInfeasibleError(
                f"could not place {class_id=} flaws after {max_attempts} attempts",
                count / part_count)
        center, axes = _sample_flaw(rng, labels.shape, lo, hi, size_range)
        sl, local = rasterize_spheroid(labels.shape, center, axes)
        if not local.any() or not allowed[sl][local].all():
            continue
        region = labels[sl]
        new = local & (region == MATERIAL) if class_id == PORE else local & (region != INCLUSION)
        n_new = int(new.sum())
        if n_new == 0:
            continue
        prev = region[new].copy()
        region[new] = class_id
        if count + n_new >= target and (count + n_new - target) > (target - count):
            region[new] = prev
            return
        count += n_new


def generate_phantom(spec: PhantomSpec):
    """Build (LabelVolume, Volume) for ``spec``. Deterministic in ``spec.seed``."""
    spec.validate()
    shape = tuple(int(n) for n in spec.grid_shape)
    envelope = spec.part_shape.mask(shape)
    part_count = int(envelope.sum())
    if part_count == 0:
        raise EmptyPartError("part envelope contains no voxels")
    allowed = ndimage.binary_erosion(envelope, iterations=1, border_value=0)
    achievable = allowed.sum() / part_count
    total = spec.pore_density_target + spec.inclusion_density_target
    if total > achievable:
        raise DensityInfeasibleError(
            f"requested pore+inclusion fraction {total:.4g} exceeds eroded envelope", achievable)

    labels = np.where(envelope, MATERIAL, AIR).astype(np.uint8)
    for fl in sorted(spec.flaws, key=lambda f: f.class_id != PORE):
        sl, local = rasterize_spheroid(shape, fl.center, fl.semi_axes)
        if not envelope[sl][local].all():
            raise PhantomError(f"explicit flaw at {fl.center} extends outside the part")
        region = labels[sl]
        if fl.class_id == PORE:
            region[local & (region != INCLUSION)] = PORE
        elif fl.class_id == INCLUSION:
            region[local] = INCLUSION
        else:
            raise PhantomError(f"flaw class must be pore or inclusion, got {fl.class_id}")

    inc_rng, pore_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(2))
    _place(labels, allowed, part_count, round(spec.inclusion_density_target * part_count),
           INCLUSION, inc_rng, spec.flaw_size_range)
    _place(labels, allowed, part_count, round(spec.pore_density_target * part_count),
           PORE, pore_rng, spec.flaw_size_range)

    meta = {"seed": spec.seed, "spec": spec.to_dict()}
    lab = LabelVolume(labels, spec.voxel_pitch, meta)
    return lab, Volume(attenuation_from_labels(lab, spec.mu_material, spec.mu_inclusion), spec.voxel_pitch, dict(meta))


def attenuation_from_labels(labels, mu_material, mu_inclusion):
    lut = np.array([0.0, mu_material, 0.0, mu_inclusion], dtype=np.float32)
    data = labels.data if isinstance(labels, LabelVolume) else labels
    return lut[data]


def defect_volume_density(labels, class_id):
    """Fraction of part voxels (material, pore, inclusion) that belong to ``class_id``."""
    if class_id not in (PORE, INCLUSION):
        raise ValueError(f"class_id must be pore (2) or inclusion (3), got {class_id}")
    data = labels.data if isinstance(labels, LabelVolume) else np.asarray(labels)
    part = int((data != AIR).sum())
    if part == 0:
        raise EmptyPartError("empty part: no material, pore or inclusion voxels")
    return int((data == class_id).sum()) / part
