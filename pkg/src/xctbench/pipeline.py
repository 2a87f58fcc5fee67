"""Experiment orchestration: dataset suites, per-class models, aggregation, OoD and forgetting runs."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .adapter import (AdapterConfig, AdapterModel, DegenerateClassError, FinetuneConfig,
                      FrozenBackbone, binary_dataset, finetune, load_backbone, pretrain_backbone, save_backbone)
from .metrics import FrechetConfig, MetricsReport, frechet_distance, patch_features, spearman, write_reports_csv
from .phantom import PhantomSpec, attenuation_from_labels, defect_volume_density, generate_phantom
from .segnet import (SliceDataset, TrainConfig, UNet25, UNet25Config, build_unet25, make_slice_dataset,
                     predict_volume, train, write_history_csv)
from .tomo import ScanConfig, simulate_scan
from .volume import (AIR, CLASS_IDS, CLASS_NAMES, INCLUSION, PORE, LabelVolume, Volume, load_labels,
                     as_array, load_volume, save_labels, save_volume)

log = logging.getLogger(__name__)

DEFECT_CLASSES = ("material", "pore", "inclusion")
DEFAULT_PRIORITY = ("inclusion", "pore", "material")
TRAIN_ROLES = ("train_1", "train_2")


class PipelineError(RuntimeError):
    pass


def _canon(obj):
    return json.dumps(obj, sort_keys=True, default=str)


def config_hash(obj):
    return hashlib.sha256(_canon(obj).encode()).hexdigest()[:16]


@dataclass
class Dataset:
    name: str
    role: str
    volume: Volume
    labels: LabelVolume
    phantom: PhantomSpec
    scan: ScanConfig
    frechet: dict = field(default_factory=dict)
    densities: dict = field(default_factory=dict)

    @property
    def identity(self):
        return (_canon(self.phantom.to_dict()), _canon(self.scan.to_dict()))


@dataclass
class DatasetSuite:
    datasets: dict
    frechet_config: FrechetConfig = FrechetConfig(n_crops=48, crop_size=24)

    def by_role(self, prefix):
        return [d for d in self.datasets.values() if d.role.startswith(prefix)]

    @property
    def train_sets(self):
        return [d for d in self.datasets.values() if d.role in TRAIN_ROLES]

    @property
    def test_sets(self):
        return self.by_role("test_")

    def __getitem__(self, name):
        try:
            return self.datasets[name]
        except KeyError:
            raise PipelineError(f"missing dataset {name!r}") from None

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {"frechet_config": asdict(self.frechet_config), "datasets": []}
        for d in self.datasets.values():
            save_volume(directory / f"{d.name}_recon.raw", d.volume, d.phantom.seed, d.phantom.to_dict())
            save_labels(directory / f"{d.name}_labels.raw", d.labels, d.phantom.seed, d.phantom.to_dict())
            index["datasets"].append({"name": d.name, "role": d.role, "phantom": d.phantom.to_dict(),
                                      "scan": d.scan.to_dict(), "frechet": d.frechet, "densities": d.densities})
        (directory / "suite.json").write_text(json.dumps(index, indent=2))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        index = json.loads((directory / "suite.json").read_text())
        datasets = {}
        for e in index["datasets"]:
            datasets[e["name"]] = Dataset(
                e["name"], e["role"], load_volume(directory / f"{e['name']}_recon.raw"),
                load_labels(directory / f"{e['name']}_labels.raw"), PhantomSpec.from_dict(e["phantom"]),
                ScanConfig.from_dict(e["scan"]), e.get("frechet", {}), e.get("densities", {}))
        return cls(datasets, FrechetConfig(**index["frechet_config"]))


def _phantom(seed, nz=24, pores=0.03, inclusions=0.006, mu=4.0, mu_inc=8.0, size=64):
    return {"grid_shape": [nz, size, size], "voxel_pitch": 17.3, "mu_material": mu, "mu_inclusion": mu_inc,
            "pore_density_target": pores, "inclusion_density_target": inclusions,
            "flaw_size_range": [1.5, 3.0], "seed": seed}


def _scan(seed, noise="gaussian(0.7)", views=360, sub=1, bh=0.02):
    return {"n_views": views, "noise_model": noise, "beam_hardening_strength": bh,
            "subsample_factor": sub, "seed": seed}


def default_suite_spec(train_slices=80, test_slices=24, seed=0):
    """Desk-scale training and test datasets; test sets differ from training in noise, views and defect density."""
    s = seed * 1000
    tr1_scan = _scan(s + 11)
    return {
        "frechet": {"n_crops": 48, "crop_size": 24, "seed": seed},
        "datasets": [
            {"name": "Tr-1", "role": "train_1", "phantom": _phantom(s + 1, train_slices), "scan": tr1_scan},
            {"name": "Tr-2", "role": "train_2",
             "phantom": _phantom(s + 2, max(8, train_slices // 4), 0.008, 0.0, mu=3.0, mu_inc=6.0),
             "scan": _scan(s + 12, "poisson(35)", bh=0.04)},
            {"name": "Te-3", "role": "test_ind", "phantom": _phantom(s + 3, test_slices, 0.025, 0.006),
             "scan": dict(tr1_scan, seed=s + 13)},
            {"name": "Te-1", "role": "test_ood_incl", "phantom": _phantom(s + 4, test_slices, 0.012, 0.0025),
             "scan": _scan(s + 14, "gaussian(1.0)", bh=0.03)},
            {"name": "Te-2", "role": "test_ood_noisy", "phantom": _phantom(s + 5, test_slices, 0.045, 0.001),
             "scan": _scan(s + 15, "gaussian(1.5)", bh=0.03)},
            {"name": "Te-4", "role": "test_ood_clean", "phantom": _phantom(s + 6, test_slices, 0.04, 0.0),
             "scan": _scan(s + 16, "none", views=720, bh=0.0)},
            {"name": "Te-5", "role": "test_ood_synth", "phantom": _phantom(s + 7, test_slices, 0.04, 0.0),
             "scan": _scan(s + 17, "poisson(250)", bh=0.02)},
            {"name": "Te-6", "role": "test_ood_sparse", "phantom": _phantom(s + 8, test_slices, 0.05, 0.002),
             "scan": _scan(s + 18, "gaussian(0.7)", views=360, sub=12, bh=0.03)},
        ],
    }


def forgetting_spec(shots=15, test_slices=24, seed=0, noise="poisson(30)", sub=8, bh=0.06):
    """Few-shot source and matching target test set sharing one acquisition regime unseen in training."""
    s = seed * 1000
    return [
        {"name": "Fs-1", "role": "fewshot", "phantom": _phantom(s + 21, shots, 0.04, 0.003),
         "scan": _scan(s + 31, noise, sub=sub, bh=bh)},
        {"name": "Te-7", "role": "test_ood_target", "phantom": _phantom(s + 22, test_slices, 0.04, 0.003),
         "scan": _scan(s + 32, noise, sub=sub, bh=bh)},
    ]


def build_dataset(entry, n_workers=1):
    spec = PhantomSpec.from_dict(entry["phantom"])
    scan = ScanConfig.from_dict(entry["scan"])
    labels, mu = generate_phantom(spec)
    recon, _ = simulate_scan(labels, mu, scan, n_workers=n_workers)
    dens = {"pore": defect_volume_density(labels, PORE), "inclusion": defect_volume_density(labels, INCLUSION)}
    return Dataset(entry["name"], entry["role"], recon, labels, spec, scan, {}, dens)


def dataset_features(ds: Dataset, cfg: FrechetConfig):
    from scipy import ndimage

    part = ds.labels.data != AIR
    interior = np.stack([ndimage.binary_erosion(p, iterations=2) for p in part])
    return patch_features(normalize_volume(ds.volume.data), cfg, mask=interior)


def score_suite(suite: DatasetSuite):
    """Fréchet distance of every non-training dataset against each training set and their pool."""
    cfg = suite.frechet_config
    feats = {name: dataset_features(d, cfg) for name, d in suite.datasets.items()}
    train_names = [d.name for d in suite.train_sets]
    pooled = np.concatenate([feats[n] for n in train_names]) if train_names else None
    for name, d in suite.datasets.items():
        d.frechet = {t: frechet_distance(feats[name], feats[t]) for t in train_names}
        if pooled is not None:
            d.frechet["train"] = frechet_distance(feats[name], pooled)
    return suite


def check_suite_integrity(suite: DatasetSuite):
    train_ids = {d.identity: d.name for d in suite.train_sets}
    for d in suite.datasets.values():
        if d.role in TRAIN_ROLES:
            continue
        if d.identity in train_ids:
            raise PipelineError(f"{d.name} shares phantom/scan config and seed with {train_ids[d.identity]}")


def build_suite(spec, n_workers=1):
    """Generate, scan and score every dataset listed in ``spec``."""
    fr = spec.get("frechet", {})
    suite = DatasetSuite({e["name"]: build_dataset(e, n_workers) for e in spec["datasets"]},
                         FrechetConfig(**{"n_crops": 48, "crop_size": 24, **fr}))
    check_suite_integrity(suite)
    return score_suite(suite)


def normalize_volume(data):
    """Scale so the median bright (part) voxel is 1; independent of absolute attenuation units."""
    data = np.asarray(data, dtype=np.float64)
    thr = 0.5 * np.percentile(data, 99)
    fg = data[data > thr]
    scale = float(np.median(fg)) if fg.size else 1.0
    return data / (scale if scale > 0 else 1.0)


def slices_of(ds: Dataset, window=5, z_indices=None):
    return make_slice_dataset(normalize_volume(ds.volume.data), ds.labels, window, 1.0, z_indices, ds.name)


def aggregate_multiclass(binary_masks, threshold=0.5, priority=DEFAULT_PRIORITY):
    """Combine per-class probability maps into one label volume.

    Each map is thresholded (>= ``threshold``); where several classes claim a voxel the
    earliest entry in ``priority`` wins; unclaimed voxels are air.
    """
    maps = {}
    for k, v in binary_masks.items():
        name = CLASS_NAMES[k] if isinstance(k, (int, np.integer)) else k
        maps[name] = np.asarray(as_array(v), dtype=np.float64)
    shapes = {m.shape for m in maps.values()}
    if len(shapes) != 1:
        raise ValueError(f"class maps differ in shape: {sorted(shapes)}")
    shape = shapes.pop()
    out = np.full(shape, AIR, dtype=np.uint8)
    for name in reversed(priority):
        if name in maps:
            out[maps[name] >= threshold] = CLASS_IDS[name]
    return LabelVolume(out)


@dataclass
class ClassModelSet:
    models: dict
    backbone: FrozenBackbone
    provenance: dict = field(default_factory=dict)
    threshold: float = 0.5
    priority: tuple = DEFAULT_PRIORITY

    @property
    def fingerprints(self):
        return {name: self.backbone.fingerprint() for name in self.models}

    def class_maps(self, volume):
        x = normalize_volume(as_array(volume))[:, None]
        return {name: m.predict_proba(x) for name, m in self.models.items()}

    def segment(self, volume):
        maps = self.class_maps(volume)
        shape = as_array(volume).shape
        for name in DEFECT_CLASSES:
            maps.setdefault(name, np.zeros(shape))
        return aggregate_multiclass(maps, self.threshold, self.priority)

    def copy(self):
        new = copy.copy(self)
        new.models = {}
        for name, m in self.models.items():
            clone = AdapterModel(self.backbone, m.cfg, m.class_name)
            clone.trainable.load_state(m.trainable.state())
            new.models[name] = clone
        new.provenance = copy.deepcopy(self.provenance)
        return new

    def save(self, directory):
        directory = Path(directory)
        save_backbone(self.backbone, directory / "backbone")
        for name, m in self.models.items():
            m.save(directory / f"adapter_{name}")
        (directory / "model_set.json").write_text(json.dumps(
            {"classes": list(self.models), "provenance": self.provenance, "threshold": self.threshold,
             "priority": list(self.priority)}, indent=2, default=str))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = json.loads((directory / "model_set.json").read_text())
        backbone = load_backbone(directory / "backbone")
        models = {n: AdapterModel.load(directory / f"adapter_{n}", backbone) for n in meta["classes"]}
        return cls(models, backbone, meta["provenance"], meta["threshold"], tuple(meta["priority"]))


@dataclass
class BaselineSegmenter:
    model: UNet25
    history: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def segment(self, volume):
        return predict_volume(self.model, normalize_volume(as_array(volume)))

    def save(self, directory):
        directory = Path(directory)
        self.model.params.save(directory / "unet25", "unet25", len(self.history),
                               extra={"unet_config": asdict(self.model.cfg), "provenance": self.provenance})
        write_history_csv(directory / "history.csv", self.history)

    @classmethod
    def load(cls, directory):
        from .autodiff import load_arrays, read_manifest

        directory = Path(directory)
        manifest = read_manifest(directory / "unet25")
        model = build_unet25(UNet25Config(**manifest["unet_config"]))
        model.params.load_state(load_arrays(directory / "unet25"))
        return cls(model, [], manifest.get("provenance", {}))


@dataclass
class TrainSettings:
    """Knobs for :func:`train_class_models`."""

    unet: UNet25Config = field(default_factory=UNet25Config)
    unet_train: TrainConfig = field(default_factory=TrainConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    pretrain_epochs: int = 8
    pretrain_lr: float = 1e-3
    seed: int = 0


def pretrain_spec(seed=0, nz=48):
    """Held-out phantom + scan used only to pretrain the frozen backbone."""
    return {"name": "pretrain", "role": "pretrain",
            "phantom": _phantom(10_000 + seed, nz, 0.03, 0.008, mu=5.0, mu_inc=9.0),
            "scan": _scan(10_100 + seed, "gaussian(0.8)", views=240, bh=0.03)}


def train_class_models(suite, method="adapter", classes=DEFECT_CLASSES, settings: TrainSettings = None,
                       backbone: FrozenBackbone | None = None, train_names=None):
    """Train either one 4-class U-Net (``baseline_unet``) or one binary adapter model per class."""
    settings = settings or TrainSettings()
    sets = [suite[n] for n in train_names] if train_names else suite.train_sets
    if not sets:
        raise PipelineError("suite has no training datasets")
    slices = SliceDataset.concat([slices_of(d) for d in sets])
    prov = {"method": method, "train_sets": [d.name for d in sets], "seed": settings.seed,
            "n_samples": len(slices)}
    if method == "baseline_unet":
        model = build_unet25(settings.unet, settings.seed)
        res = train(model, slices, settings.unet_train)
        prov.update({"best_epoch": res.best_epoch, "best_val_dice": res.best_val_dice,
                     "class_weights": res.class_weights, "loss": "weighted_dice", "n_classes": settings.unet.n_classes,
                     "train_config": asdict(settings.unet_train)})
        return BaselineSegmenter(res.model, res.history, prov)
    if method != "adapter":
        raise PipelineError(f"unknown method {method!r}")
    if backbone is None:
        pre = build_dataset(pretrain_spec(settings.seed))
        backbone = pretrain_backbone(slices_of(pre), settings.pretrain_epochs, settings.pretrain_lr,
                                     seed=settings.seed)
        prov["backbone_pretrain"] = pre.name
    models, prov["classes"], prov["skipped"] = {}, {}, {}
    for name in classes:
        ds = binary_dataset(slices, CLASS_IDS[name])
        m = AdapterModel(backbone, settings.adapter, name)
        try:
            res = finetune(m, ds, settings.finetune)
        except DegenerateClassError as exc:
            log.warning("skipping class %s: %s", name, exc)
            prov["skipped"][name] = str(exc)
            continue
        models[name] = res.model
        prov["classes"][name] = {"best_epoch": res.best_epoch, "best_val_iou": res.best_val_iou,
                                 "history": res.history, "finetune": asdict(settings.finetune)}
    return ClassModelSet(models, backbone, prov)


def evaluate_model(segmenter, ds: Dataset, model_id, classes=DEFECT_CLASSES):
    pred = segmenter.segment(ds.volume)
    extra = {"frechet_vs_train": ds.frechet.get("train", math.nan),
             "pore_density": ds.densities.get("pore", math.nan),
             "inclusion_density": ds.densities.get("inclusion", math.nan)}
    return [MetricsReport.build(pred, ds.labels, CLASS_IDS[c], ds.name, model_id, extra) for c in classes]


def run_experiment(suite, models, report_dir=None, datasets=None):
    """Evaluate every (model, test dataset, class); returns (reports, summary)."""
    if not models:
        raise PipelineError("no models given")
    sets = [suite[n] for n in datasets] if datasets else suite.test_sets
    if not sets:
        raise PipelineError("suite has no test datasets")
    reports = []
    for model_id, seg in models.items():
        for ds in sets:
            reports.extend(evaluate_model(seg, ds, model_id))
    summary = summarize(reports)
    if report_dir is not None:
        write_reports(reports, summary, report_dir)
    return reports, summary


def summarize(reports):
    summary = {"models": {}}
    for model_id in dict.fromkeys(r.model_id for r in reports):
        rows = [r for r in reports if r.model_id == model_id]
        pore = [r for r in rows if r.class_name == "pore"]
        fr = [r.extra["frechet_vs_train"] for r in pore]
        ious = [r.iou for r in pore]
        summary["models"][model_id] = {
            "datasets": [r.dataset_id for r in pore],
            "frechet_vs_train": fr,
            "pore_iou": ious,
            "spearman_frechet_vs_pore_iou": spearman(fr, ious) if len(pore) >= 3 else None,
        }
    return summary


def write_reports(reports, summary, report_dir):
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    for r in reports:
        r.to_json(report_dir / f"{r.model_id}__{r.dataset_id}__{r.class_name}.json")
    write_reports_csv(report_dir / "reports.csv", reports)
    (report_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


@dataclass
class ForgettingReport:
    few_shot_size: int
    entries: list = field(default_factory=list)
    groups: dict = field(default_factory=dict)
    fingerprint_unchanged: bool = True

    @classmethod
    def from_pairs(cls, size, base_reports, refined_reports, group_of, fingerprint_unchanged=True):
        refined = {(r.dataset_id, r.class_name): r for r in refined_reports}
        entries = []
        for b in base_reports:
            r = refined[(b.dataset_id, b.class_name)]
            entries.append({"dataset": b.dataset_id, "group": group_of(b.dataset_id), "class": b.class_name,
                            "base_iou": b.iou, "refined_iou": r.iou, "delta": r.iou - b.iou,
                            "base_f1": b.mean.get("f1"), "refined_f1": r.mean.get("f1")})
        rep = cls(size, entries, {}, fingerprint_unchanged)
        rep.groups = rep.group_means()
        return rep

    def group_means(self):
        out = {}
        for g in dict.fromkeys(e["group"] for e in self.entries):
            for c in dict.fromkeys(e["class"] for e in self.entries):
                ds = [e["delta"] for e in self.entries if e["group"] == g and e["class"] == c]
                if ds:
                    out[f"{g}/{c}"] = float(np.mean(ds))
            out[g] = float(np.mean([e["delta"] for e in self.entries if e["group"] == g]))
        return out

    def delta(self, dataset, class_name):
        for e in self.entries:
            if e["dataset"] == dataset and e["class"] == class_name:
                return e["delta"]
        raise KeyError((dataset, class_name))

    def to_dict(self):
        return {"few_shot_size": self.few_shot_size, "entries": self.entries, "groups": self.groups,
                "fingerprint_unchanged": self.fingerprint_unchanged}


def refinetune_and_compare(base: ClassModelSet, few_shot: SliceDataset, suite, sizes=(9, 15),
                           target_datasets=(), cfg: FinetuneConfig = None, classes=None):
    """Re-fine-tune copies of ``base`` on the last ``n`` few-shot images for each n in ``sizes``.

    Returns {n: ForgettingReport} comparing base and refined IoU on every test dataset; datasets
    in ``target_datasets`` form the target-OoD group, ``test_ind`` datasets the original-InD group.
    """
    if few_shot is None or len(few_shot) == 0:
        raise PipelineError("empty few-shot set")
    cfg = cfg or FinetuneConfig()
    fp = base.backbone.fingerprint()
    base_reports = [r for ds in suite.test_sets for r in evaluate_model(base, ds, "base")]

    def group_of(name):
        if name in target_datasets:
            return "target_ood"
        return "original_ind" if suite[name].role == "test_ind" else "other_ood"

    out = {}
    for n in sizes:
        shots = few_shot.subset(np.arange(max(0, len(few_shot) - n), len(few_shot)))
        refined = base.copy()
        for name, m in refined.models.items():
            if classes is not None and name not in classes:
                continue
            ds = binary_dataset(shots, CLASS_IDS[name])
            if not np.any(ds.y):
                refined.provenance.setdefault("refine_skipped", {})[name] = "no positives in few-shot set"
                continue
            finetune(m, ds, cfg, val_dataset=ds)
        ref_reports = [r for ds in suite.test_sets for r in evaluate_model(refined, ds, f"refined-{n}")]
        out[n] = ForgettingReport.from_pairs(n, base_reports, ref_reports, group_of,
                                             refined.backbone.fingerprint() == fp)
    return out


def write_manifest(path, command, config, seeds, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "config_hash": config_hash(config), "seeds": seeds,
                "tool_version": __version__, **(extra or {})}
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return manifest


def settings_from_dict(d):
    d = dict(d or {})
    kw = {}
    if "unet" in d:
        kw["unet"] = UNet25Config(**d.pop("unet"))
    if "unet_train" in d:
        kw["unet_train"] = TrainConfig(**d.pop("unet_train"))
    if "adapter" in d:
        a = d.pop("adapter")
        if "insertion_points" in a:
            a["insertion_points"] = tuple(a["insertion_points"])
        kw["adapter"] = AdapterConfig(**a)
    if "finetune" in d:
        kw["finetune"] = FinetuneConfig(**d.pop("finetune"))
    return TrainSettings(**kw, **d)


def generate_phantoms(spec, directory):
    """Write label volumes for every dataset entry; acquisition is left to :func:`scan_phantoms`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for e in spec["datasets"]:
        ps = PhantomSpec.from_dict(e["phantom"])
        labels, _ = generate_phantom(ps)
        save_labels(directory / f"{e['name']}_labels.raw", labels, ps.seed, ps.to_dict())
    (directory / "suite_spec.json").write_text(json.dumps(spec, indent=2))


def scan_phantoms(directory, n_workers=1):
    """Simulate acquisitions for phantoms written by :func:`generate_phantoms` and save the full suite."""
    directory = Path(directory)
    spec = json.loads((directory / "suite_spec.json").read_text())
    datasets = {}
    for e in spec["datasets"]:
        ps = PhantomSpec.from_dict(e["phantom"])
        sc = ScanConfig.from_dict(e["scan"])
        labels = load_labels(directory / f"{e['name']}_labels.raw")
        mu = attenuation_from_labels(labels, ps.mu_material, ps.mu_inclusion)
        recon, _ = simulate_scan(labels, mu, sc, n_workers=n_workers)
        dens = {"pore": defect_volume_density(labels, PORE), "inclusion": defect_volume_density(labels, INCLUSION)}
        datasets[e["name"]] = Dataset(e["name"], e["role"], recon, labels, ps, sc, {}, dens)
    suite = DatasetSuite(datasets, FrechetConfig(**{"n_crops": 48, "crop_size": 24, **spec.get("frechet", {})}))
    check_suite_integrity(suite)
    score_suite(suite).save(directory)
    return suite


def plot_data(summary):
    """Flatten a run summary into (model, dataset, frechet, pore_iou) rows for plotting."""
    rows = []
    for model_id, m in summary["models"].items():
        for ds, fr, v in zip(m["datasets"], m["frechet_vs_train"], m["pore_iou"]):
            rows.append({"model_id": model_id, "dataset_id": ds, "frechet_vs_train": fr, "pore_iou": v})
    return rows
