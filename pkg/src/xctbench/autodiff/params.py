"""Named parameter tensors split into frozen and trainable sets, with checkpoints."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .core import DiffArray


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Ordered mapping of name -> DiffArray; trainable entries carry ``requires_grad``."""

    def __init__(self):
        self._params = {}

    def add(self, name, value, trainable=True):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = DiffArray(value, requires_grad=trainable, name=name)
        self._params[name] = p
        return p

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    @property
    def trainable_names(self):
        return [n for n, p in self._params.items() if p.requires_grad]

    @property
    def frozen_names(self):
        return [n for n, p in self._params.items() if not p.requires_grad]

    def trainable(self):
        return [p for p in self._params.values() if p.requires_grad]

    def count(self, trainable=None):
        return sum(p.size for p in self._params.values()
                   if trainable is None or p.requires_grad == trainable)

    def freeze(self, names=None):
        for n in (self._params if names is None else names):
            p = self._params[n]
            p.requires_grad = False
            p.grad = None

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def merge(self, other, prefix=""):
        """Adopt the entries of ``other`` (same DiffArray objects) under ``prefix``."""
        for n, p in other.items():
            if prefix + n in self._params:
                raise KeyError(f"duplicate parameter {prefix + n!r}")
            self._params[prefix + n] = p
        return self

    def state(self, names=None):
        return {n: self._params[n].value.copy() for n in (self._params if names is None else names)}

    def load_state(self, state, strict=True):
        for n, v in state.items():
            if n not in self._params:
                if strict:
                    raise CheckpointError(f"unknown parameter {n!r}")
                continue
            p = self._params[n]
            if p.value.shape != v.shape:
                raise CheckpointError(f"shape mismatch for {n!r}: {p.value.shape} vs {v.shape}")
            p.value[...] = v

    def fingerprint(self, names=None):
        """SHA-256 over (name, shape, dtype, bytes) of the chosen entries, in sorted name order."""
        h = hashlib.sha256()
        for n in sorted(self._params if names is None else names):
            v = self._params[n].value
            h.update(n.encode())
            h.update(str(v.shape).encode())
            h.update(v.dtype.str.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def save(self, path, model_id="model", step=0, names=None, extra=None):
        """Write ``<path>.npz`` (flat archive) and ``<path>.json`` (manifest)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        names = list(self._params) if names is None else list(names)
        np.savez(path.with_suffix(".npz"), **{n: self._params[n].value for n in names})
        manifest = {
            "model_id": model_id,
            "step": int(step),
            "frozen_names": [n for n in names if not self._params[n].requires_grad],
            "trainable_names": [n for n in names if self._params[n].requires_grad],
            "entries": [{"name": n, "shape": list(self._params[n].shape), "dtype": "float64"} for n in names],
        }
        if extra:
            manifest.update(extra)
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2))
        return manifest

    @classmethod
    def load(cls, path):
        """Rebuild a store from a checkpoint, restoring each entry's frozen/trainable role."""
        path = Path(path)
        manifest = read_manifest(path)
        store = cls()
        trainable = set(manifest["trainable_names"])
        with np.load(path.with_suffix(".npz")) as arc:
            for entry in manifest["entries"]:
                store.add(entry["name"], arc[entry["name"]], trainable=entry["name"] in trainable)
        return store, manifest


def read_manifest(path):
    return json.loads(Path(path).with_suffix(".json").read_text())


def load_arrays(path):
    with np.load(Path(path).with_suffix(".npz")) as arc:
        return {k: arc[k].copy() for k in arc.files}
