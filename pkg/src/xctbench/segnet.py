"""2.5D U-Net baseline: weighted Dice loss, Adam, plateau schedule with best-state reset."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .volume import LabelVolume, as_array

log = logging.getLogger(__name__)

DICE_EPS = 1e-6


class TrainingError(RuntimeError):
    pass


def weighted_dice_score(pred, truth, weights, eps=DICE_EPS, class_axis=None):
    """(2 sum_i w_i sum p_i g_i + eps) / (sum_i w_i sum (p_i + g_i) + eps) as a DiffArray."""
    pred = ad.as_array(pred)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ad.ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if class_axis is None:
        class_axis = 1 if pred.ndim == 4 else 0
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (pred.shape[class_axis],):
        raise ValueError(f"need {pred.shape[class_axis]} class weights, got {weights.shape}")
    if np.any(weights <= 0):
        raise ValueError("class weights must be strictly positive")
    wshape = [1] * pred.ndim
    wshape[class_axis] = -1
    w = weights.reshape(wshape)
    inter = ad.reduce_sum(ad.mul(ad.mul(pred, truth), w))
    denom = ad.reduce_sum(ad.mul(ad.add(pred, truth), w))
    return ad.div(ad.add(ad.mul(inter, 2.0), eps), ad.add(denom, eps))


def weighted_dice_loss(pred, truth, weights, eps=DICE_EPS, class_axis=None):
    """1 - weighted Dice score. Class axis defaults to 1 for 4-D inputs, else 0."""
    truth_arr = np.asarray(truth)
    if not np.all((truth_arr == 0) | (truth_arr == 1)):
        raise ValueError("truth masks must be binary")
    return ad.sub(1.0, weighted_dice_score(pred, truth, weights, eps, class_axis))


def one_hot(labels, n_classes=4):
    labels = np.asarray(labels)
    return np.moveaxis(np.eye(n_classes)[labels], -1, 1 if labels.ndim == 3 else 0)


def inverse_frequency_weights(labels, n_classes=4, floor=1e-4, power=1.0):
    """Per-class (1/frequency)**power normalised to mean 1; absent classes count as frequency ``floor``.

    power=2 gives the generalized-Dice weighting.
    """
    counts = np.bincount(np.asarray(labels).ravel(), minlength=n_classes)[:n_classes].astype(np.float64)
    freq = np.maximum(counts / counts.sum(), floor)
    w = freq ** -power
    return w / w.mean()


def slice_window(volume, z, window=5):
    """Stack slices z-h..z+h (h = window // 2) with replicate padding at the volume ends."""
    data = as_array(volume)
    if window % 2 == 0 or window < 1:
        raise ValueError(f"window must be a positive odd number, got {window}")
    nz = data.shape[0]
    if window > nz:
        raise ValueError(f"window {window} exceeds volume depth {nz}")
    h = window // 2
    idx = np.clip(np.arange(z - h, z + h + 1), 0, nz - 1)
    return np.asarray(data[idx], dtype=np.float64)


@dataclass
class SliceDataset:
    """Paired inputs (n, channels, H, W) and integer label maps (n, H, W)."""

    x: np.ndarray
    y: np.ndarray
    source: str = ""

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("inputs and labels differ in length")

    def __len__(self):
        return len(self.x)

    def subset(self, idx):
        return SliceDataset(self.x[idx], self.y[idx], self.source)

    @classmethod
    def concat(cls, parts):
        return cls(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]),
                   "+".join(p.source for p in parts))


def make_slice_dataset(volume, labels, window=5, scale=1.0, z_indices=None, source=""):
    data = np.asarray(as_array(volume), dtype=np.float64) / scale
    lab = labels.data if isinstance(labels, LabelVolume) else np.asarray(labels)
    zs = range(data.shape[0]) if z_indices is None else z_indices
    x = np.stack([slice_window(data, z, window) for z in zs])
    y = np.stack([lab[z] for z in zs]).astype(np.int64)
    return SliceDataset(x, y, source)


@dataclass
class UNet25Config:
    in_channels: int = 5
    base_width: int = 8
    depth: int = 3
    n_classes: int = 4
    patch_size: int = 64

    def __post_init__(self):
        if self.in_channels % 2 == 0:
            raise ValueError("in_channels must be odd (the centre slice is the target)")
        if self.depth < 1 or self.base_width < 1:
            raise ValueError("depth and base_width must be positive")
        if self.patch_size % (2 ** self.depth):
            raise ValueError(f"patch_size {self.patch_size} not divisible by 2**depth={2 ** self.depth}")


def _conv_params(store, name, cin, cout, k, rng, trainable=True):
    std = np.sqrt(2.0 / (cin * k * k))
    store.add(f"{name}.w", rng.normal(0.0, std, size=(cout, cin, k, k)), trainable)
    store.add(f"{name}.b", np.zeros(cout), trainable)


def _conv(store, name, x, padding=1, act=True):
    y = ad.conv2d(x, store[f"{name}.w"], store[f"{name}.b"], padding=padding)
    return ad.relu(y) if act else y


class UNet25:
    """U-Net over a 5-slice window; returns per-pixel class probabilities."""

    def __init__(self, cfg: UNet25Config, seed=0):
        self.cfg = cfg
        self.params = ad.ParamStore()
        rng = np.random.default_rng(seed)
        w = [cfg.base_width * 2 ** l for l in range(cfg.depth + 1)]
        cin = cfg.in_channels
        for l in range(cfg.depth):
            _conv_params(self.params, f"enc{l}.conv1", cin, w[l], 3, rng)
            _conv_params(self.params, f"enc{l}.conv2", w[l], w[l], 3, rng)
            cin = w[l]
        _conv_params(self.params, "bottleneck.conv1", w[-2], w[-1], 3, rng)
        _conv_params(self.params, "bottleneck.conv2", w[-1], w[-1], 3, rng)
        for l in reversed(range(cfg.depth)):
            _conv_params(self.params, f"dec{l}.up", w[l + 1], w[l], 3, rng)
            _conv_params(self.params, f"dec{l}.conv1", 2 * w[l], w[l], 3, rng)
            _conv_params(self.params, f"dec{l}.conv2", w[l], w[l], 3, rng)
        _conv_params(self.params, "head", w[0], cfg.n_classes, 1, rng)

    def forward(self, x):
        p = self.params
        h = ad.as_array(x)
        if h.ndim != 4 or h.shape[1] != self.cfg.in_channels:
            raise ad.ShapeError(f"expected (batch, {self.cfg.in_channels}, H, W), got {h.shape}")
        if h.shape[2] % 2 ** self.cfg.depth or h.shape[3] % 2 ** self.cfg.depth:
            raise ad.ShapeError(f"spatial size {h.shape[2:]} not divisible by {2 ** self.cfg.depth}")
        skips = []
        for l in range(self.cfg.depth):
            h = _conv(p, f"enc{l}.conv2", _conv(p, f"enc{l}.conv1", h))
            skips.append(h)
            h = ad.avg_pool2d(h, 2)
        h = _conv(p, "bottleneck.conv2", _conv(p, "bottleneck.conv1", h))
        for l in reversed(range(self.cfg.depth)):
            h = _conv(p, f"dec{l}.up", ad.upsample_nearest(h, 2))
            h = ad.concat([h, skips[l]], axis=1)
            h = _conv(p, f"dec{l}.conv2", _conv(p, f"dec{l}.conv1", h))
        logits = _conv(p, "head", h, padding=0, act=False)
        return ad.softmax(logits, axis=1)

    __call__ = forward

    def predict_proba(self, x, batch_size=16):
        out = []
        for i in range(0, len(x), batch_size):
            out.append(self.forward(x[i:i + batch_size]).value)
        return np.concatenate(out)

    def predict(self, x, batch_size=16):
        return self.predict_proba(x, batch_size).argmax(axis=1).astype(np.uint8)


def build_unet25(cfg: UNet25Config, seed=0):
    """Return a freshly initialised U-Net; ``model.params`` is its ParamStore, ``model.forward`` the map."""
    return UNet25(cfg, seed)


def unet25_param_count(cfg: UNet25Config):
    """Closed-form parameter count of :class:`UNet25`."""
    conv = lambda cin, cout, k=3: cout * cin * k * k + cout
    w = [cfg.base_width * 2 ** l for l in range(cfg.depth + 1)]
    total, cin = 0, cfg.in_channels
    for l in range(cfg.depth):
        total += conv(cin, w[l]) + conv(w[l], w[l])
        cin = w[l]
    total += conv(w[-2], w[-1]) + conv(w[-1], w[-1])
    for l in range(cfg.depth):
        total += conv(w[l + 1], w[l]) + conv(2 * w[l], w[l]) + conv(w[l], w[l])
    return total + conv(w[0], cfg.n_classes, 1)


@dataclass
class TrainConfig:
    lr_init: float = 2e-4
    plateau_patience: int = 15
    lr_decay_factor: float = 0.5
    max_epochs: int = 150
    batch_size: int = 8
    class_weights: tuple | None = None
    val_fraction: float = 0.2
    seed: int = 0
    improvement_threshold: float = 1e-4
    time_budget_s: float | None = None
    prior_bias_init: bool = True
    class_weight_power: float = 1.0

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must be in (0, 1)")
        if self.class_weights is not None and min(self.class_weights) <= 0:
            raise ValueError("class weights must be strictly positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.plateau_patience < 1:
            raise ValueError("batch_size, max_epochs and plateau_patience must be positive")


@dataclass
class TrainResult:
    model: UNet25
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_dice: float = 0.0
    class_weights: tuple = ()
    diverged: bool = False

    def write_history(self, path):
        write_history_csv(path, self.history)


HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_dice", "lr", "reset_flag")


def write_history_csv(path, history):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        wr.writeheader()
        wr.writerows(history)


def split_indices(n, val_fraction, seed):
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    if n_val >= n:
        raise TrainingError("dataset too small for a train/validation split")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def crisp_dice(pred_labels, truth_labels, n_classes):
    """Mean Dice over classes present in either map."""
    scores = []
    for c in range(n_classes):
        a, b = pred_labels == c, truth_labels == c
        tot = a.sum() + b.sum()
        if tot:
            scores.append(2.0 * (a & b).sum() / tot)
    return float(np.mean(scores)) if scores else 1.0


def train(model: UNet25, dataset: SliceDataset, cfg: TrainConfig):
    """Adam training with plateau-triggered lr decay plus reset to the best-validation-loss state.

    Returns the model holding its best-validation-Dice parameters and the per-epoch history.
    """
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    n_classes = model.cfg.n_classes
    tr_idx, va_idx = split_indices(len(dataset), cfg.val_fraction, cfg.seed)
    train_set, val_set = dataset.subset(tr_idx), dataset.subset(va_idx)
    weights = np.asarray(cfg.class_weights if cfg.class_weights is not None
                         else inverse_frequency_weights(train_set.y, n_classes, power=cfg.class_weight_power))
    val_onehot = one_hot(val_set.y, n_classes)
    if cfg.prior_bias_init:
        # start the head at the class prior so rare heavily-weighted classes do not swamp early updates
        freq = np.bincount(train_set.y.ravel(), minlength=n_classes)[:n_classes] / train_set.y.size
        model.params["head.b"].value[:] = np.log(np.maximum(freq, 1e-4))
    opt = ad.Adam(model.params.trainable(), lr=cfg.lr_init)
    rng = np.random.default_rng(cfg.seed + 1)
    names = model.params.trainable_names

    best_loss, best_loss_state = np.inf, model.params.state(names)
    best_dice, best_dice_state, best_epoch = -1.0, model.params.state(names), 0
    stagnant = 0
    history = []
    diverged = False
    start = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        last_good = model.params.state(names)
        try:
            for i in range(0, len(order), cfg.batch_size):
                b = order[i:i + cfg.batch_size]
                opt.zero_grad()
                loss = weighted_dice_loss(model.forward(train_set.x[b]), one_hot(train_set.y[b], n_classes), weights)
                ad.backward(loss)
                last_good = model.params.state(names)
                opt.step()
                losses.append(loss.item())
                if not all(np.all(np.isfinite(p.value)) for p in opt.params):
                    raise ad.NumericError("parameters became non-finite")
        except ad.NumericError as exc:
            log.warning("training diverged at epoch %d: %s", epoch, exc)
            model.params.load_state(last_good)
            diverged = True
            break

        probs = model.predict_proba(val_set.x, cfg.batch_size)
        val_loss = float(weighted_dice_loss(probs, val_onehot, weights).value)
        val_dice = crisp_dice(probs.argmax(axis=1), val_set.y, n_classes)
        reset = 0
        if val_loss < best_loss * (1.0 - cfg.improvement_threshold):
            best_loss, best_loss_state, stagnant = val_loss, model.params.state(names), 0
        else:
            stagnant += 1
        if val_dice > best_dice:
            best_dice, best_dice_state, best_epoch = val_dice, model.params.state(names), epoch
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss,
                        "val_dice": val_dice, "lr": opt.lr, "reset_flag": 0})
        if stagnant >= cfg.plateau_patience:
            opt.lr *= cfg.lr_decay_factor
            model.params.load_state(best_loss_state)
            opt.reset_state()
            stagnant = 0
            reset = 1
            history[-1]["reset_flag"] = reset
        log.info("epoch %d loss %.4f val %.4f dice %.4f lr %.2e", epoch, history[-1]["train_loss"],
                 val_loss, val_dice, history[-1]["lr"])
        if cfg.time_budget_s is not None and time.perf_counter() - start > cfg.time_budget_s:
            break

    model.params.load_state(best_dice_state)
    return TrainResult(model, history, best_epoch, best_dice, tuple(float(w) for w in weights), diverged)


def predict_volume(model: UNet25, volume, scale=1.0, batch_size=16):
    """Segment every slice of ``volume`` with its 5-slice window; returns a LabelVolume."""
    data = np.asarray(as_array(volume), dtype=np.float64) / scale
    window = model.cfg.in_channels
    out = np.zeros(data.shape, dtype=np.uint8)
    for z0 in range(0, data.shape[0], batch_size):
        zs = range(z0, min(z0 + batch_size, data.shape[0]))
        x = np.stack([slice_window(data, z, window) for z in zs])
        out[z0:z0 + len(zs)] = model.predict(x, batch_size)
    return LabelVolume(out, getattr(volume, "voxel_pitch", 1.0))


def config_dict(cfg):
    return asdict(cfg)
