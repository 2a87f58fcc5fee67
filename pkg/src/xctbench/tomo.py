"""Parallel-beam acquisition simulation and filtered backprojection."""
from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .volume import LabelVolume, Volume, load_raw, save_raw

MIN_VIEWS = 8
FILTERS = ("ramlak", "hann", "hamming", "cosine", "shepp-logan")


class ScanError(ValueError):
    pass


class InsufficientViewsError(ScanError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    """``kind`` is 'none', 'gaussian' (param = sigma) or 'poisson' (param = photon count)."""

    kind: str = "none"
    param: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "gaussian", "poisson"):
            raise ScanError(f"unknown noise model {self.kind!r}")
        if self.kind == "gaussian" and self.param < 0:
            raise ScanError("gaussian sigma must be >= 0")
        if self.kind == "poisson" and self.param <= 0:
            raise ScanError("poisson photon count must be > 0")

    @classmethod
    def parse(cls, text):
        """Parse 'none', 'gaussian(0.05)' or 'poisson(1e4)'."""
        if isinstance(text, NoiseModel):
            return text
        if isinstance(text, dict):
            return cls(text.get("kind", "none"), float(text.get("param", 0.0)))
        m = re.fullmatch(r"\s*(\w+)\s*(?:\(\s*([^)]*)\s*\))?\s*", str(text))
        if not m:
            raise ScanError(f"cannot parse noise model {text!r}")
        return cls(m.group(1), float(m.group(2)) if m.group(2) else 0.0)

    def __str__(self):
        return "none" if self.kind == "none" else f"{self.kind}({self.param:g})"


@dataclass(frozen=True)
class ScanConfig:
    n_views: int = 360
    angular_range: float = 180.0
    detector_bins: int | None = None
    noise_model: NoiseModel = NoiseModel()
    beam_hardening_strength: float = 0.0
    subsample_factor: int = 1
    seed: int = 0
    filter: str = "hann"

    def __post_init__(self):
        object.__setattr__(self, "noise_model", NoiseModel.parse(self.noise_model))
        if self.n_views < 1 or self.subsample_factor < 1:
            raise ScanError("n_views and subsample_factor must be positive")
        if self.angular_range not in (180.0, 360.0):
            raise ScanError(f"angular_range must be 180 or 360, got {self.angular_range}")
        if self.n_views // self.subsample_factor < MIN_VIEWS:
            raise ScanError(f"n_views / subsample_factor must be >= {MIN_VIEWS}")
        if self.beam_hardening_strength < 0:
            raise ScanError("beam_hardening_strength must be >= 0")
        if self.filter not in FILTERS:
            raise ScanError(f"unknown filter {self.filter!r}; choose from {FILTERS}")

    def bins_for(self, n):
        need = min_detector_bins(n)
        if self.detector_bins is None:
            return need
        if self.detector_bins < need:
            raise ScanError(f"detector_bins={self.detector_bins} does not span the {n}-pixel slice diagonal ({need})")
        return int(self.detector_bins)

    def to_dict(self):
        d = asdict(self)
        d["noise_model"] = str(self.noise_model)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def min_detector_bins(n):
    return int(math.ceil(n * math.sqrt(2.0)))


@dataclass
class Sinogram:
    data: np.ndarray
    angles: np.ndarray
    geometry: str = "parallel"
    pixel_size: float = 1.0
    config: dict | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] != len(self.angles):
            raise ScanError(f"sinogram data {self.data.shape} does not match {len(self.angles)} angles")
        if not np.all(np.isfinite(self.data)):
            raise ScanError("sinogram contains non-finite values")
        if len(self.angles) > 1 and not np.all(np.diff(self.angles) > 0):
            raise ScanError("sinogram angles must be strictly increasing")

    @property
    def n_views(self):
        return self.data.shape[0]

    @property
    def detector_bins(self):
        return self.data.shape[1]


def view_angles(n_views, angular_range=180.0):
    return np.arange(n_views) * (math.radians(angular_range) / n_views)


def _rng(seed, slice_index):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(slice_index)])


def line_integrals(image, angles, n_det, pixel_size=1.0, backend=None):
    """Noise-free parallel-beam line integrals of ``image`` (square, attenuation per unit length)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ScanError(f"slice must be square 2-D, got shape {image.shape}")
    return kernels.project(image, np.cos(angles), np.sin(angles), n_det, 0.5, backend) * pixel_size


def degrade(p, config: ScanConfig, rng):
    """Beam-hardening surrogate p - b*p^2 followed by the configured sinogram noise."""
    if config.beam_hardening_strength:
        p = p - config.beam_hardening_strength * p * p
    nm = config.noise_model
    if nm.kind == "gaussian" and nm.param > 0:
        p = p + rng.normal(0.0, nm.param, size=p.shape)
    elif nm.kind == "poisson":
        counts = rng.poisson(nm.param * np.exp(-p))
        p = -np.log(np.maximum(counts, 1) / nm.param)
    return p


def forward_project(volume_slice, config: ScanConfig, pixel_size=1.0, slice_index=0, backend=None):
    """Simulate one slice's acquisition: projection, beam hardening, noise, view sub-sampling."""
    volume_slice = np.asarray(volume_slice, dtype=np.float64)
    if volume_slice.ndim != 2 or volume_slice.shape[0] != volume_slice.shape[1]:
        raise ScanError(f"slice must be square 2-D, got shape {volume_slice.shape}")
    n_det = config.bins_for(volume_slice.shape[0])
    angles = view_angles(config.n_views, config.angular_range)
    p = line_integrals(volume_slice, angles, n_det, pixel_size, backend)
    p = degrade(p, config, _rng(config.seed, slice_index))
    sino = Sinogram(p, angles, "parallel", pixel_size, config.to_dict())
    return subsample_views(sino, config.subsample_factor)


def subsample_views(sino: Sinogram, factor):
    """Keep every ``factor``-th view starting at index 0."""
    factor = int(factor)
    if factor < 1:
        raise ScanError("subsample factor must be >= 1")
    if factor > sino.n_views:
        raise ScanError(f"subsample factor {factor} exceeds {sino.n_views} views")
    if factor == 1:
        return sino
    return Sinogram(sino.data[::factor].copy(), sino.angles[::factor].copy(),
                    sino.geometry, sino.pixel_size, sino.config)


def ramp_filter(n_det, window="hann"):
    """Frequency response of the band-limited ramp (spatial-domain construction) with apodization."""
    size = max(64, 1 << int(math.ceil(math.log2(2 * n_det))))
    n = np.concatenate((np.arange(1, size // 2 + 1, 2), np.arange(size // 2 - 1, 0, -2)))
    h = np.zeros(size)
    h[0] = 0.25
    h[1::2] = -1.0 / (np.pi * n) ** 2
    resp = np.real(np.fft.fft(h))
    omega = np.fft.fftfreq(size)
    if window == "hann":
        resp *= 0.5 * (1.0 + np.cos(2 * np.pi * omega))
    elif window == "hamming":
        resp *= 0.54 + 0.46 * np.cos(2 * np.pi * omega)
    elif window == "cosine":
        resp *= np.cos(np.pi * omega)
    elif window == "shepp-logan":
        resp *= np.sinc(omega)
    elif window != "ramlak":
        raise ScanError(f"unknown filter {window!r}")
    return resp


def fbp_reconstruct(sino: Sinogram, out_size, window=None, backend=None):
    """Filtered backprojection onto an ``out_size`` x ``out_size`` grid."""
    if sino.n_views < MIN_VIEWS:
        raise InsufficientViewsError(f"insufficient views: {sino.n_views} < {MIN_VIEWS}")
    if out_size > sino.detector_bins:
        raise ScanError(f"out_size {out_size} exceeds detector_bins {sino.detector_bins}")
    if window is None:
        window = (sino.config or {}).get("filter", "hann")
    resp = ramp_filter(sino.detector_bins, window)
    padded = np.zeros((sino.n_views, len(resp)))
    padded[:, :sino.detector_bins] = sino.data
    filtered = np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * resp, axis=1))[:, :sino.detector_bins]
    img = kernels.backproject(filtered, np.cos(sino.angles), np.sin(sino.angles), out_size, backend)
    # d_theta = span/K, and a full turn sees every line twice, so both cases reduce to pi/K
    return img * (np.pi / sino.n_views) / sino.pixel_size


def simulate_scan(labels: LabelVolume, mu_map, config: ScanConfig, n_workers=1, backend=None):
    """Scan a labelled phantom slice by slice and reconstruct it.

    ``mu_map`` is either {class_id: attenuation} or an attenuation array/Volume of
    the same shape. Returns ``(reconstruction, labels)``; attenuation units are
    per millimetre with the voxel pitch taken from ``labels`` (micrometres).
    """
    if isinstance(mu_map, dict):
        lut = np.zeros(4)
        for cid, mu in mu_map.items():
            lut[int(cid)] = mu
        mu = lut[labels.data]
    else:
        mu = np.asarray(mu_map.data if isinstance(mu_map, Volume) else mu_map, dtype=np.float64)
        if mu.shape != labels.shape:
            raise ScanError(f"attenuation shape {mu.shape} != label shape {labels.shape}")
    nz, ny, nx = mu.shape
    if ny != nx:
        raise ScanError(f"slices must be square, got {ny}x{nx}")
    pixel = labels.voxel_pitch * 1e-3

    def one(z):
        sino = forward_project(mu[z], config, pixel, z, backend)
        return fbp_reconstruct(sino, nx, config.filter, backend)

    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as ex:
            slices = list(ex.map(one, range(nz)))
    else:
        slices = [one(z) for z in range(nz)]
    rec = np.stack(slices).astype(np.float32)
    meta = {"scan": config.to_dict(), "source": labels.meta.get("spec")}
    return Volume(rec, labels.voxel_pitch, meta), labels


def relative_rmse(recon, truth, mask=None):
    recon = np.asarray(recon, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if mask is not None:
        recon, truth = recon[mask], truth[mask]
    return float(np.sqrt(np.mean((recon - truth) ** 2)) / np.sqrt(np.mean(truth ** 2)))


def fov_mask(n, fraction=0.9):
    c = (n - 1) / 2.0
    yy, xx = np.ogrid[:n, :n]
    return (yy - c) ** 2 + (xx - c) ** 2 <= (fraction * n / 2.0) ** 2


def save_sinogram(path, sino: Sinogram):
    return save_raw(path, sino.data, np.float32, {
        "n_views": sino.n_views,
        "detector_bins": sino.detector_bins,
        "angles": sino.angles.tolist(),
        "geometry": sino.geometry,
        "pixel_size": sino.pixel_size,
        "config": sino.config,
    })


def load_sinogram(path):
    arr, meta = load_raw(path)
    return Sinogram(arr.astype(np.float64), np.array(meta["angles"]), meta.get("geometry", "parallel"),
                    float(meta.get("pixel_size", 1.0)), meta.get("config"))
