"""Frozen convolutional backbone with Conv-LoRA mixture-of-experts adapters and a trainable mask decoder."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .metrics import iou as mask_iou
from .segnet import SliceDataset, TrainingError, one_hot, split_indices, weighted_dice_loss

log = logging.getLogger(__name__)

# (name, in_channels, out_channels, pool_before)
BACKBONE_BLOCKS = (
    ("stem", 1, 16, False),
    ("b1", 16, 32, False),
    ("b2", 32, 48, True),
    ("b3", 48, 48, False),
    ("b4", 48, 64, True),
    ("b5", 64, 64, False),
)
EMBED_BLOCKS = ("b1", "b3", "b5")


class DegenerateClassError(TrainingError):
    pass


@dataclass
class AdapterConfig:
    n_experts: int = 8
    rank: int = 4
    insertion_points: tuple = ("b3", "b5")
    conv_kernel: int = 3
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.insertion_points = tuple(self.insertion_points)
        if self.n_experts < 1:
            raise ValueError("n_experts must be >= 1")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        known = {b[0] for b in BACKBONE_BLOCKS}
        bad = set(self.insertion_points) - known
        if bad:
            raise ValueError(f"unknown insertion points {sorted(bad)}")
        for name, cin, cout, _ in BACKBONE_BLOCKS:
            if name in self.insertion_points and self.rank * 2 > min(cin, cout) and name != "stem":
                raise ValueError(f"rank {self.rank} is not small relative to block {name} width")


def _he(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class FrozenBackbone:
    """Small convolutional image encoder plus a fixed prompt embedding; every entry is frozen."""

    def __init__(self, seed=0, params=None):
        if params is None:
            rng = np.random.default_rng(seed)
            params = ad.ParamStore()
            for name, cin, cout, _ in BACKBONE_BLOCKS:
                params.add(f"{name}.w", _he(rng, (cout, cin, 3, 3)), trainable=False)
                params.add(f"{name}.b", np.zeros(cout), trainable=False)
            params.add("prompt.no_prompt_embed", rng.normal(0.0, 0.02, size=BACKBONE_BLOCKS[-1][2]), trainable=False)
        self.params = params
        self.freeze()

    def freeze(self):
        self.params.freeze()

    def fingerprint(self):
        return self.params.fingerprint()

    def forward(self, x, adapters=None):
        """Return {block_name: embedding}. ``adapters`` maps block name -> ConvLoRA."""
        h = ad.as_array(x)
        if h.ndim != 4 or h.shape[1] != 1:
            raise ad.ShapeError(f"backbone expects (batch, 1, H, W), got {h.shape}")
        out = {}
        for name, _, _, pool in BACKBONE_BLOCKS:
            if pool:
                h = ad.avg_pool2d(h, 2)
            pre = ad.conv2d(h, self.params[f"{name}.w"], self.params[f"{name}.b"], padding=1)
            if adapters and name in adapters:
                pre = ad.add(pre, adapters[name].branch(h))
            h = ad.relu(pre)
            out[name] = h
        prompt = self.params["prompt.no_prompt_embed"].value.reshape(1, -1, 1, 1)
        out["b5"] = ad.add(out["b5"], prompt)
        return out


class ConvLoRA:
    """Low-rank branch W_D * sum_i gate_i * N_i(W_E x) added to a frozen block's pre-activation.

    W_E projects to ``rank`` channels, each expert N_i is a depth-wise 3x3 conv at that
    rank, the gate is a ``conv_kernel`` conv over the projected features followed by a
    softmax across experts, and W_D projects back (zero-initialised).
    """

    def __init__(self, store, prefix, cin, cout, cfg: AdapterConfig, rng):
        self.store, self.prefix, self.cfg = store, prefix, cfg
        r, n, k = cfg.rank, cfg.n_experts, cfg.conv_kernel
        store.add(f"{prefix}.W_E", rng.normal(0.0, cfg.init_scale, size=(r, cin, 1, 1)))
        for i in range(n):
            store.add(f"{prefix}.expert{i}.w", rng.normal(0.0, np.sqrt(2.0 / 9.0), size=(r, 1, 3, 3)))
            store.add(f"{prefix}.expert{i}.b", np.zeros(r))
        store.add(f"{prefix}.gate.w", rng.normal(0.0, cfg.init_scale, size=(n, r, k, k)))
        store.add(f"{prefix}.gate.b", np.zeros(n))
        store.add(f"{prefix}.W_D", np.zeros((cout, r, 1, 1)))

    @property
    def n_experts(self):
        return self.cfg.n_experts

    def expert_names(self):
        return [f"{self.prefix}.expert{i}" for i in range(self.cfg.n_experts)]

    def gate_weights(self, z):
        s = self.store
        logits = ad.conv2d(z, s[f"{self.prefix}.gate.w"], s[f"{self.prefix}.gate.b"], padding=self.cfg.conv_kernel // 2)
        return ad.softmax(logits, axis=1)

    def branch(self, x):
        s, p, r, n = self.store, self.prefix, self.cfg.rank, self.cfg.n_experts
        z = ad.conv2d(x, s[f"{p}.W_E"])
        tiled = ad.concat([z] * n, axis=1) if n > 1 else z
        w = ad.concat([s[f"{p}.expert{i}.w"] for i in range(n)], axis=0) if n > 1 else s[f"{p}.expert0.w"]
        b = ad.concat([s[f"{p}.expert{i}.b"] for i in range(n)], axis=0) if n > 1 else s[f"{p}.expert0.b"]
        experts = ad.conv2d(tiled, w, b, padding=1, groups=n * r)
        nb, _, hh, ww = experts.shape
        experts = ad.reshape(experts, (nb, n, r, hh, ww))
        gate = ad.reshape(self.gate_weights(z), (nb, n, 1, hh, ww))
        mixed = ad.reduce_sum(ad.mul(experts, gate), axis=1)
        return ad.conv2d(mixed, s[f"{p}.W_D"])


class MaskDecoderHead:
    """Fuses the b1/b3/b5 embeddings into one single-class probability map at input resolution."""

    def __init__(self, store, rng, width=8, prefix="head", n_out=1):
        self.store, self.prefix, self.n_out = store, prefix, n_out
        chans = {name: cout for name, _, cout, _ in BACKBONE_BLOCKS}
        for name in EMBED_BLOCKS:
            store.add(f"{prefix}.{name}.w", _he(rng, (width, chans[name], 1, 1)))
            store.add(f"{prefix}.{name}.b", np.zeros(width))
        store.add(f"{prefix}.fuse.w", _he(rng, (width, width, 3, 3)))
        store.add(f"{prefix}.fuse.b", np.zeros(width))
        store.add(f"{prefix}.out.w", _he(rng, (n_out, width, 1, 1)) * 0.1)
        store.add(f"{prefix}.out.b", np.zeros(n_out))

    def _proj(self, emb, name):
        s = self.store
        return ad.relu(ad.conv2d(emb[name], s[f"{self.prefix}.{name}.w"], s[f"{self.prefix}.{name}.b"]))

    def logits(self, emb):
        s, p = self.store, self.prefix
        u = ad.add(ad.upsample_nearest(self._proj(emb, "b5"), 2), self._proj(emb, "b3"))
        u = ad.add(ad.upsample_nearest(u, 2), self._proj(emb, "b1"))
        u = ad.relu(ad.conv2d(u, s[f"{p}.fuse.w"], s[f"{p}.fuse.b"], padding=1))
        return ad.conv2d(u, s[f"{p}.out.w"], s[f"{p}.out.b"])

    def forward(self, emb):
        if self.n_out == 1:
            return ad.sigmoid(self.logits(emb))
        return ad.softmax(self.logits(emb), axis=1)


class AdapterModel:
    """Frozen backbone + adapters + trainable mask decoder for one binary class."""

    def __init__(self, backbone: FrozenBackbone, cfg: AdapterConfig = None, class_name="", head_width=8):
        self.backbone = backbone
        self.cfg = cfg or AdapterConfig()
        self.class_name = class_name
        self.trainable = ad.ParamStore()
        rng = np.random.default_rng(self.cfg.seed)
        blocks = {name: (cin, cout) for name, cin, cout, _ in BACKBONE_BLOCKS}
        self.adapters = {name: ConvLoRA(self.trainable, f"adapter.{name}", *blocks[name], self.cfg, rng)
                         for name in self.cfg.insertion_points}
        self.head = MaskDecoderHead(self.trainable, rng, head_width)

    @property
    def params(self):
        """All entries: frozen backbone plus trainable adapter/decoder parameters."""
        return ad.ParamStore().merge(self.backbone.params, "backbone.").merge(self.trainable)

    def forward(self, x, use_adapters=True):
        emb = self.backbone.forward(x, self.adapters if use_adapters else None)
        return self.head.forward(emb)

    __call__ = forward

    def predict_proba(self, x, batch_size=16):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[:, None]
        return np.concatenate([self.forward(x[i:i + batch_size]).value[:, 0]
                               for i in range(0, len(x), batch_size)])

    def save(self, path, model_id=None, step=0):
        """Store only trainable entries, tagged with the backbone fingerprint."""
        return self.trainable.save(path, model_id or f"adapter-{self.class_name}", step, extra={
            "backbone_fingerprint": self.backbone.fingerprint(),
            "class_name": self.class_name,
            "adapter_config": asdict(self.cfg),
        })

    @classmethod
    def load(cls, path, backbone: FrozenBackbone):
        manifest = ad.read_manifest(path)
        if manifest.get("backbone_fingerprint") != backbone.fingerprint():
            raise ad.CheckpointError("adapter checkpoint was trained on a different backbone")
        model = cls(backbone, AdapterConfig(**manifest["adapter_config"]), manifest.get("class_name", ""))
        model.trainable.load_state(ad.load_arrays(path))
        return model


def count_trainable_fraction(store: ad.ParamStore):
    total = store.count()
    if total == 0:
        raise ValueError("empty parameter store")
    return store.count(trainable=True) / total


def boundary_weights(truth, lam=5.0, kernel=15):
    """1 + lam * |local mean of truth - truth| (zero-padded k x k mean)."""
    t = np.asarray(truth, dtype=np.float64)
    t4 = t.reshape((-1, 1) + t.shape[-2:])
    local = ad.avg_pool2d(t4, kernel, 1, kernel // 2).value
    return (1.0 + lam * np.abs(local - t4)).reshape(t.shape)


def structure_loss(pred, truth, lam=5.0, kernel=15, eps=1e-7, smooth=1.0):
    """Boundary-weighted BCE plus boundary-weighted IoU loss, averaged over images.

    ``pred`` holds probabilities shaped (N, 1, H, W), (N, H, W) or (H, W).
    """
    pred = ad.as_array(pred)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ad.ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    spatial = pred.shape[-2:]
    n = int(np.prod(pred.shape[:-2])) if pred.ndim > 2 else 1
    p = ad.reshape(ad.clip(pred, eps, 1.0 - eps), (n,) + spatial)
    g = truth.reshape((n,) + spatial)
    w = boundary_weights(g, lam, kernel)
    axes = (1, 2)
    bce = ad.neg(ad.add(ad.mul(g, ad.log(p)), ad.mul(1.0 - g, ad.log(ad.sub(1.0, p)))))
    wbce = ad.div(ad.reduce_sum(ad.mul(w, bce), axis=axes), w.sum(axis=axes))
    inter = ad.reduce_sum(ad.mul(ad.mul(p, g), w), axis=axes)
    union = ad.reduce_sum(ad.mul(ad.add(p, g), w), axis=axes)
    wiou = ad.sub(1.0, ad.div(ad.add(inter, smooth), ad.add(ad.sub(union, inter), smooth)))
    return ad.reduce_mean(ad.add(wbce, wiou))


@dataclass
class BinaryDataset:
    x: np.ndarray  # (n, 1, H, W)
    y: np.ndarray  # (n, H, W) in {0, 1}
    source: str = ""

    def __len__(self):
        return len(self.x)

    def subset(self, idx):
        return BinaryDataset(self.x[idx], self.y[idx], self.source)


def binary_dataset(slices: SliceDataset, class_id):
    """Centre channel of each window paired with the mask of ``class_id``."""
    c = slices.x.shape[1] // 2
    return BinaryDataset(slices.x[:, c:c + 1].copy(), (slices.y == class_id).astype(np.float64), slices.source)


@dataclass
class FinetuneConfig:
    epochs: int = 20
    lr: float = 3e-4
    batch_size: int = 4
    val_fraction: float = 0.2
    seed: int = 0
    early_stop_patience: int | None = None
    structure_lambda: float = 5.0
    structure_kernel: int = 15
    threshold: float = 0.5
    time_budget_s: float | None = None


@dataclass
class FinetuneResult:
    model: AdapterModel
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_iou: float = 0.0


def _val_iou(model, ds, threshold, batch):
    prob = model.predict_proba(ds.x, batch)
    return float(np.mean([mask_iou(p > threshold, t > 0.5) for p, t in zip(prob, ds.y)]))


def finetune(model: AdapterModel, dataset: BinaryDataset, cfg: FinetuneConfig = FinetuneConfig(),
             val_dataset: BinaryDataset | None = None):
    """Train adapters + mask decoder on one binary class; the backbone never changes.

    Returns the model restored to its best validation-IoU state.
    """
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    if not np.any(dataset.y > 0):
        raise DegenerateClassError("degenerate class: no positive pixels in any sample")
    if val_dataset is None:
        tr, va = split_indices(len(dataset), cfg.val_fraction, cfg.seed)
        train_set, val_set = dataset.subset(tr), dataset.subset(va)
    else:
        train_set, val_set = dataset, val_dataset
    fp_before = model.backbone.fingerprint()
    opt = ad.Adam(model.trainable.trainable(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 7)
    names = model.trainable.trainable_names
    best_iou, best_state, best_epoch = -1.0, model.trainable.state(names), 0
    history, stale = [], 0
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for b in np.array_split(rng.permutation(len(train_set)), max(1, -(-len(train_set) // cfg.batch_size))):
            opt.zero_grad()
            loss = structure_loss(model.forward(train_set.x[b]), train_set.y[b][:, None],
                                  cfg.structure_lambda, cfg.structure_kernel)
            ad.backward(loss)
            opt.step()
            losses.append(loss.item())
        val_iou = _val_iou(model, val_set, cfg.threshold, 16)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_iou": val_iou, "lr": opt.lr})
        log.info("%s epoch %d loss %.4f val IoU %.4f", model.class_name, epoch, history[-1]["train_loss"], val_iou)
        if val_iou > best_iou:
            best_iou, best_state, best_epoch, stale = val_iou, model.trainable.state(names), epoch, 0
        else:
            stale += 1
        if cfg.early_stop_patience is not None and stale >= cfg.early_stop_patience:
            break
        if cfg.time_budget_s is not None and time.perf_counter() - start > cfg.time_budget_s:
            break
    model.trainable.load_state(best_state)
    if model.backbone.fingerprint() != fp_before:
        raise TrainingError("backbone parameters changed during fine-tuning")
    return FinetuneResult(model, history, best_epoch, best_iou)


def pretrain_backbone(slices: SliceDataset, epochs=10, lr=1e-3, batch_size=8, seed=0, n_classes=4,
                      time_budget_s=None):
    """Train a backbone + temporary multiclass decoder on a held-out task, then freeze the backbone."""
    backbone = FrozenBackbone(seed)
    for p in backbone.params.trainable() + [backbone.params[n] for n in backbone.params]:
        p.requires_grad = True
        p.grad = np.zeros_like(p.value)
    backbone.params["prompt.no_prompt_embed"].requires_grad = False
    backbone.params["prompt.no_prompt_embed"].grad = None
    head_store = ad.ParamStore()
    head = MaskDecoderHead(head_store, np.random.default_rng(seed + 1), width=16, prefix="pretrain", n_out=n_classes)
    c = slices.x.shape[1] // 2
    x = slices.x[:, c:c + 1]
    weights = np.ones(n_classes)
    opt = ad.Adam(backbone.params.trainable() + head_store.trainable(), lr=lr)
    rng = np.random.default_rng(seed + 2)
    start = time.perf_counter()
    for epoch in range(epochs):
        losses = []
        for b in np.array_split(rng.permutation(len(x)), max(1, -(-len(x) // batch_size))):
            opt.zero_grad()
            probs = head.forward(backbone.forward(x[b]))
            loss = weighted_dice_loss(probs, one_hot(slices.y[b], n_classes), weights)
            ad.backward(loss)
            opt.step()
            losses.append(loss.item())
        log.info("pretrain epoch %d loss %.4f", epoch + 1, np.mean(losses))
        if time_budget_s is not None and time.perf_counter() - start > time_budget_s:
            break
    backbone.freeze()
    return backbone


def save_backbone(backbone: FrozenBackbone, path):
    return backbone.params.save(path, "frozen-backbone", extra={"fingerprint": backbone.fingerprint()})


def load_backbone(path):
    store, manifest = ad.ParamStore.load(path)
    bb = FrozenBackbone(params=store)
    if manifest.get("fingerprint") and manifest["fingerprint"] != bb.fingerprint():
        raise ad.CheckpointError("backbone checkpoint content does not match its fingerprint")
    return bb

