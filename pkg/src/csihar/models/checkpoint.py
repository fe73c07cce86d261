"""Checkpoint directories: ``manifest.json`` plus ``params.bin``.

``params.bin`` is the concatenation of float64 little-endian tensors in the
order of the manifest's ``tensors`` index.  Model parameters come first;
optional extra tensors (optimizer moments, best-so-far weights) follow under
prefixed names.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from csihar.data import atomic_write_dir
from csihar.errors import FormatVersionError, IntegrityError, ShapeError
from csihar.models.core import Model, ModelConfig, build_model

CHECKPOINT_VERSION = 1
_F64 = np.dtype("<f8")


@dataclass
class Checkpoint:
    model: Model
    epoch: int = 0
    history: Optional[dict] = None
    extra: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_checkpoint(model: Model, path, *, epoch: int = 0, history: Optional[dict] = None,
                    extra: Optional[dict] = None, meta: Optional[dict] = None) -> None:
    tensors = [(name, p.data) for name, p in model.params.items()]
    tensors += sorted((extra or {}).items())

    def write(tmp: Path):
        index, offset = [], 0
        with open(tmp / "params.bin", "wb") as fh:
            for name, arr in tensors:
                raw = np.ascontiguousarray(arr, dtype=_F64).tobytes()
                fh.write(raw)
                index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                              "nbytes": len(raw)})
                offset += len(raw)
        manifest = {
            "format_version": CHECKPOINT_VERSION,
            "config": model.config.to_dict(),
            "seed": model.config.seed,
            "epoch": int(epoch),
            "history": history,
            "n_params": len(model.params),
            "tensors": index,
            "meta": meta or {},
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")

    atomic_write_dir(Path(path), write)


def load_checkpoint(path, model: Optional[Model] = None) -> Checkpoint:
    """Read a checkpoint; with ``model`` given, load into it after checking shapes."""
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise FormatVersionError(
            f"{mpath}: format_version {manifest.get('format_version')!r}, "
            f"supported {CHECKPOINT_VERSION}")
    raw = (path / "params.bin").read_bytes()
    expected = sum(e["nbytes"] for e in manifest["tensors"])
    if len(raw) != expected:
        raise IntegrityError(f"params.bin holds {len(raw)} bytes, expected {expected}")
    arrays = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(raw, dtype=_F64, count=e["nbytes"] // 8, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)

    config = ModelConfig.from_dict(manifest["config"])
    if model is None:
        model = build_model(config)
    elif model.config.kind != config.kind:
        raise ShapeError(f"checkpoint holds a {config.kind} model, target is {model.config.kind}")
    names = [e["name"] for e in manifest["tensors"][: manifest["n_params"]]]
    if names != list(model.params):
        raise ShapeError(f"checkpoint parameters {names[:3]}... do not match the model's")
    model.load_state_dict({n: arrays[n] for n in names})
    extra = {n: a for n, a in arrays.items() if n not in model.params}
    return Checkpoint(model=model, epoch=manifest["epoch"], history=manifest["history"],
                      extra=extra, meta=manifest.get("meta", {}))
