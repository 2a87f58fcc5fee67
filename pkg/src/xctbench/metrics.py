"""Segmentation, image-quality and distribution-shift metrics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import CLASS_IDS, CLASS_NAMES, as_array

EMPTY_LAYER_RULE = "exclude layers with no truth and no predicted positives"
BOTH_EMPTY_VALUE = 1.0
FRECHET_EPS = 1e-6


def _binary_pair(pred, truth):
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return pred, truth


def confusion_counts(pred_mask, truth_mask):
    """(TP, FP, FN, TN) voxel counts for two binary masks."""
    p, t = _binary_pair(pred_mask, truth_mask)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return tp, fp, fn, p.size - tp - fp - fn


def iou(pred_mask, truth_mask):
    p, t = _binary_pair(pred_mask, truth_mask)
    union = np.count_nonzero(p | t)
    return BOTH_EMPTY_VALUE if union == 0 else np.count_nonzero(p & t) / union


def dice(pred_mask, truth_mask):
    p, t = _binary_pair(pred_mask, truth_mask)
    total = np.count_nonzero(p) + np.count_nonzero(t)
    return BOTH_EMPTY_VALUE if total == 0 else 2.0 * np.count_nonzero(p & t) / total


def _ratio(num, den):
    return num / den if den else 0.0


@dataclass
class LayerMetrics:
    """Per-layer scores (NaN marks layers excluded by the empty-layer rule) with their aggregates."""

    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    iou: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def n_layers(self):
        return len(self.precision)

    @property
    def valid(self):
        return ~np.isnan(self.precision)

    @property
    def n_effective(self):
        return int(self.valid.sum())

    def _agg(self, fn):
        out = {}
        for name in ("precision", "recall", "f1", "iou"):
            vals = getattr(self, name)[self.valid]
            out[name] = float(fn(vals)) if len(vals) else math.nan
        return out

    @property
    def mean(self):
        return self._agg(np.mean)

    @property
    def std(self):
        return self._agg(np.std)

    @property
    def zero_prediction(self):
        """Layers containing truth positives where nothing was predicted."""
        return (self.tp + self.fn > 0) & (self.tp + self.fp == 0)


def layer_metrics(pred_volume, truth_volume, class_id):
    """Slice-wise precision/recall/F1/IoU along z for one class, plus mean and population std."""
    if isinstance(class_id, str):
        class_id = CLASS_IDS[class_id]
    if class_id not in CLASS_NAMES:
        raise ValueError(f"unknown class_id {class_id}")
    pred = as_array(pred_volume)
    truth = as_array(truth_volume)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.ndim != 3 or pred.shape[0] < 1:
        raise ValueError("volumes must be 3-D with at least one layer")
    p = (pred == class_id).reshape(pred.shape[0], -1)
    t = (truth == class_id).reshape(truth.shape[0], -1)
    tp = np.count_nonzero(p & t, axis=1)
    fp = np.count_nonzero(p & ~t, axis=1)
    fn = np.count_nonzero(~p & t, axis=1)
    n = pred.shape[0]
    prec, rec, f1, iou_z = (np.full(n, np.nan) for _ in range(4))
    for z in range(n):
        if tp[z] + fp[z] + fn[z] == 0:
            continue
        pz = _ratio(tp[z], tp[z] + fp[z])
        rz = _ratio(tp[z], tp[z] + fn[z])
        prec[z], rec[z] = pz, rz
        f1[z] = _ratio(2.0 * pz * rz, pz + rz)
        iou_z[z] = tp[z] / (tp[z] + fp[z] + fn[z])
    return LayerMetrics(prec, rec, f1, iou_z, tp, fp, fn)


def _sqrt_psd(m):
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(features_a, features_b, eps=FRECHET_EPS):
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)) between Gaussian fits of two feature sets.

    The trace of the product root uses Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)) with eigenvalues clamped at 0.
    Covariances with an eigenvalue below ``eps`` get ``eps * I`` added.
    """
    a = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if a.shape[0] == 1 and a.ndim == 2 and np.ndim(features_a) == 1:
        a = a.T
    if b.shape[0] == 1 and b.ndim == 2 and np.ndim(features_b) == 1:
        b = b.T
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each feature set needs at least 2 vectors")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    eye = np.eye(len(cov_a))
    if np.linalg.eigvalsh(cov_a).min() < eps or np.linalg.eigvalsh(cov_b).min() < eps:
        cov_a, cov_b = cov_a + eps * eye, cov_b + eps * eye
    root_a = _sqrt_psd(cov_a)
    inner = np.linalg.eigvalsh(root_a @ cov_b @ root_a)
    tr_root = float(np.sum(np.sqrt(np.clip(inner, 0.0, None))))
    diff = mu_a - mu_b
    return float(max(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_root, 0.0))


@dataclass(frozen=True)
class FrechetConfig:
    n_crops: int = 7
    crop_size: int = 150
    feature_extractor: str = "patch-stats"
    seed: int = 0


def texture_descriptor(crop):
    """[mean, std, |grad| mean, |grad| std, spectral energy in 4 radial bands] of one crop."""
    crop = np.asarray(crop, dtype=np.float64)
    mean = crop.mean()
    centred = crop - mean
    gy, gx = np.gradient(crop)
    gmag = np.hypot(gy, gx)
    power = np.abs(np.fft.fft2(centred)) ** 2 / crop.size ** 2
    fy = np.fft.fftfreq(crop.shape[0])[:, None]
    fx = np.fft.fftfreq(crop.shape[1])[None, :]
    radius = np.hypot(fy, fx) / 0.5
    edges = (0.0, 0.25, 0.5, 0.75, np.inf)
    bands = [power[(radius > lo) & (radius <= hi)].sum() for lo, hi in zip(edges[:-1], edges[1:])]
    return np.array([mean, centred.std(), gmag.mean(), gmag.std(), *bands])


FEATURE_EXTRACTORS = {"patch-stats": texture_descriptor}


def register_feature_extractor(name, fn):
    FEATURE_EXTRACTORS[name] = fn


def crop_positions(mask, crop_size):
    """Top-left corners (z, y, x) of crop windows lying entirely inside ``mask`` (z, H, W)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[1] < crop_size or mask.shape[2] < crop_size:
        return np.zeros((0, 3), dtype=int)
    s = np.pad(mask.astype(np.int64).cumsum(1).cumsum(2), ((0, 0), (1, 0), (1, 0)))
    k = crop_size
    full = s[:, k:, k:] - s[:, :-k, k:] - s[:, k:, :-k] + s[:, :-k, :-k]
    return np.argwhere(full == k * k)


def foreground_mask(volume, fraction=0.5):
    """Voxels brighter than ``fraction`` of the 99th percentile, eroded by one voxel per slice."""
    data = np.asarray(volume, dtype=np.float64)
    thr = fraction * np.percentile(data, 99)
    fg = data > thr
    return np.stack([ndimage.binary_fill_holes(ndimage.binary_erosion(f)) for f in fg])


def patch_features(volume_or_image, cfg: FrechetConfig = FrechetConfig(), mask=None):
    """Descriptor vectors for ``cfg.n_crops`` foreground crops, one per distinct slice when possible."""
    data = np.asarray(as_array(volume_or_image), dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    if mask is None:
        mask = foreground_mask(data)
    else:
        mask = np.asarray(as_array(mask)).astype(bool).reshape(data.shape)
    pos = crop_positions(mask, cfg.crop_size)
    if len(pos) == 0:
        raise ValueError(f"foreground too small for {cfg.crop_size}x{cfg.crop_size} crops")
    extractor = FEATURE_EXTRACTORS[cfg.feature_extractor]
    rng = np.random.default_rng(cfg.seed)
    slices = np.unique(pos[:, 0])
    order = rng.permutation(len(slices))
    feats = []
    for i in range(cfg.n_crops):
        z = slices[order[i % len(slices)]]
        cand = pos[pos[:, 0] == z]
        _, y, x = cand[rng.integers(len(cand))]
        feats.append(extractor(data[z, y:y + cfg.crop_size, x:x + cfg.crop_size]))
    return np.array(feats)


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_maps(a, b, window, dynamic_range, sigma, k1, k2):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if dynamic_range <= 0:
        raise ValueError("dynamic_range must be > 0")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    w = gaussian_window(window, sigma)
    h = window // 2
    crop = (slice(h, a.shape[0] - h), slice(h, a.shape[1] - h))

    def filt(img):
        return ndimage.correlate(img, w, mode="constant")[crop]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum, cs


def ssim(image_a, image_b, window=11, dynamic_range=1.0, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM over all fully-inside Gaussian window positions."""
    lum, cs = _ssim_maps(image_a, image_b, window, dynamic_range, sigma, k1, k2)
    return float(np.mean(lum * cs))


def ssim_contrast_structure(image_a, image_b, window=11, dynamic_range=1.0, sigma=1.5, k1=0.01, k2=0.03):
    """Mean of the contrast-structure factor of SSIM (the luminance factor omitted)."""
    _, cs = _ssim_maps(image_a, image_b, window, dynamic_range, sigma, k1, k2)
    return float(np.mean(cs))


def cycle_consistency_loss(x_batch, x_reconstructed, y_batch, y_reconstructed):
    """Mean |F(G(x)) - x| plus mean |G(F(y)) - y|."""
    pairs = [(np.asarray(x_batch, float), np.asarray(x_reconstructed, float)),
             (np.asarray(y_batch, float), np.asarray(y_reconstructed, float))]
    total = 0.0
    for orig, rec in pairs:
        if orig.shape != rec.shape:
            raise ValueError(f"shape mismatch: {orig.shape} vs {rec.shape}")
        total += float(np.mean(np.abs(rec - orig)))
    return total


def spearman(x, y):
    """Spearman rank correlation with average ranks for ties; NaN when either input is constant."""
    from scipy.stats import spearmanr

    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return math.nan
    return float(spearmanr(x, y).statistic)


def _clean(v):
    if isinstance(v, (float, np.floating)):
        return None if math.isnan(v) else float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    return v


@dataclass
class MetricsReport:
    dataset_id: str
    model_id: str
    class_name: str
    per_layer: list = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    iou: float = math.nan
    dice: float = math.nan
    n_layers: int = 0
    n_effective: int = 0
    conventions: dict = field(default_factory=lambda: {
        "empty_layer_rule": EMPTY_LAYER_RULE, "both_empty_value": BOTH_EMPTY_VALUE})
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, pred, truth, class_id, dataset_id, model_id, extra=None):
        if isinstance(class_id, str):
            class_id = CLASS_IDS[class_id]
        lm = layer_metrics(pred, truth, class_id)
        p = as_array(pred) == class_id
        t = as_array(truth) == class_id
        zero_pred = lm.zero_prediction
        rows = [{"z": z, "precision": _clean(lm.precision[z]), "recall": _clean(lm.recall[z]),
                 "f1": _clean(lm.f1[z]), "iou": _clean(lm.iou[z]), "tp": int(lm.tp[z]),
                 "fp": int(lm.fp[z]), "fn": int(lm.fn[z]), "zero_prediction": bool(zero_pred[z])}
                for z in range(lm.n_layers)]
        return cls(dataset_id, model_id, CLASS_NAMES[class_id], rows,
                   {k: _clean(v) for k, v in lm.mean.items()}, {k: _clean(v) for k, v in lm.std.items()},
                   float(iou(p, t)), float(dice(p, t)), lm.n_layers, lm.n_effective, extra=dict(extra or {}))

    def to_dict(self):
        return {
            "dataset_id": self.dataset_id, "model_id": self.model_id, "class": self.class_name,
            "per_layer": self.per_layer, "mean": self.mean, "std": self.std, "iou": _clean(self.iou),
            "dice": _clean(self.dice), "n_layers": self.n_layers, "n_effective": self.n_effective,
            "conventions": self.conventions, "extra": {k: _clean(v) for k, v in self.extra.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["dataset_id"], d["model_id"], d["class"], d["per_layer"], d["mean"], d["std"],
                   math.nan if d["iou"] is None else d["iou"], math.nan if d["dice"] is None else d["dice"],
                   d["n_layers"], d["n_effective"], d["conventions"], d.get("extra", {}))

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text)
        return text

    def flat(self):
        row = {"dataset_id": self.dataset_id, "model_id": self.model_id, "class": self.class_name,
               "iou": _clean(self.iou), "dice": _clean(self.dice), "n_layers": self.n_layers,
               "n_effective": self.n_effective}
        for k, v in self.mean.items():
            row[f"mean_{k}"] = v
        for k, v in self.std.items():
            row[f"std_{k}"] = v
        for k, v in self.extra.items():
            row[k] = _clean(v)
        return row


def write_reports_csv(path, reports):
    rows = [r.flat() for r in reports]
    keys = list(dict.fromkeys(k for row in rows for k in row))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=keys)
        wr.writeheader()
        wr.writerows(rows)


def recompute_aggregates(report):
    """Mean and population std of each metric recomputed from ``report.per_layer``."""
    mean, std = {}, {}
    for name in ("precision", "recall", "f1", "iou"):
        vals = np.array([row[name] for row in report.per_layer if row[name] is not None], dtype=np.float64)
        mean[name] = float(np.mean(vals)) if len(vals) else None
        std[name] = float(np.std(vals)) if len(vals) else None
    return mean, std


def report_is_consistent(report):
    mean, std = recompute_aggregates(report)
    return mean == report.mean and std == report.std
