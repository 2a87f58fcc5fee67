"""Volume containers and the raw + JSON sidecar file format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

AIR, MATERIAL, PORE, INCLUSION = 0, 1, 2, 3
CLASS_NAMES = {AIR: "air", MATERIAL: "material", PORE: "pore", INCLUSION: "inclusion"}
CLASS_IDS = {name: cid for cid, name in CLASS_NAMES.items()}


@dataclass
class Volume:
    """Attenuation field indexed (z, y, x); ``voxel_pitch`` is in micrometers."""

    data: np.ndarray
    voxel_pitch: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.data.shape


@dataclass
class LabelVolume:
    """Per-voxel class IDs in {0=air, 1=material, 2=pore, 3=inclusion}."""

    data: np.ndarray
    voxel_pitch: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.size and self.data.max() > INCLUSION:
            raise ValueError(f"label ids must be in 0..3, got max {int(self.data.max())}")

    @property
    def shape(self):
        return self.data.shape

    def mask(self, class_id):
        return self.data == class_id


def as_array(obj):
    """Underlying ndarray of a Volume/LabelVolume, or ``obj`` itself as an array."""
    if isinstance(obj, (Volume, LabelVolume)):
        return obj.data
    return np.asarray(obj)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def save_raw(path, array, dtype, sidecar):
    """Write ``array`` as little-endian raw bytes (C/z-major order) plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(array, dtype=np.dtype(dtype).newbyteorder("<"))
    path.write_bytes(arr.tobytes(order="C"))
    meta = dict(sidecar)
    meta["shape"] = list(arr.shape)
    meta["dtype"] = np.dtype(dtype).name
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True, default=_jsonable))
    return path


def load_raw(path):
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    dtype = np.dtype(meta["dtype"]).newbyteorder("<")
    arr = np.frombuffer(path.read_bytes(), dtype=dtype).reshape(meta["shape"])
    return arr.astype(dtype.newbyteorder("="), copy=True), meta


def _jsonable(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def save_volume(path, vol: Volume, seed=None, spec=None):
    return save_raw(path, vol.data, np.float32, {
        "voxel_pitch_um": vol.voxel_pitch,
        "class_map": {str(k): v for k, v in CLASS_NAMES.items()},
        "seed": seed if seed is not None else vol.meta.get("seed"),
        "spec": spec if spec is not None else vol.meta.get("spec"),
    })


def save_labels(path, labels: LabelVolume, seed=None, spec=None):
    return save_raw(path, labels.data, np.uint8, {
        "voxel_pitch_um": labels.voxel_pitch,
        "class_map": {str(k): v for k, v in CLASS_NAMES.items()},
        "seed": seed if seed is not None else labels.meta.get("seed"),
        "spec": spec if spec is not None else labels.meta.get("spec"),
    })


def load_volume(path) -> Volume:
    arr, meta = load_raw(path)
    return Volume(arr, float(meta.get("voxel_pitch_um", 1.0)), meta)


def load_labels(path) -> LabelVolume:
    arr, meta = load_raw(path)
    return LabelVolume(arr, float(meta.get("voxel_pitch_um", 1.0)), meta)
