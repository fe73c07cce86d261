"""Experiment configuration files: strict JSON schema, defaults and seeding.

Layout::

    {
      "seed": 42,
      "output_dir": "runs/ntu_bilstm",
      "dataset": {"synth": {...}}          # or {"path": "data/ntu"}
      "preprocessing": [{"step": "highpass", "cutoff_hz": 2.0}, ...],
      "model": {"kind": "bilstm", "bilstm": {"layers": 3, "hidden": 128}},
      "training": {"learning_rate": 0.001, "max_epochs": 50}
    }

Unknown keys anywhere are rejected.  Component seeds (``dataset.synth.seed``,
``model.seed``, ``training.seed``) default to the global ``seed``; a seed
override replaces all of them.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from csihar.data import SynthConfig
from csihar.errors import ConfigError
from csihar.models.core import KINDS, BiLstmSpec, CnnGruSpec, ConvBlock
from csihar.pipeline import Pipeline, parse_steps
from csihar.training import TrainConfig

TOP_KEYS = ("seed", "output_dir", "dataset", "preprocessing", "model", "training")
MODEL_KEYS = ("kind", "bilstm", "cnn_gru", "seed", "input_shape", "n_classes")


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _reject_unknown(d: dict, allowed, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"expected an object, got {type(d).__name__}", where)
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}; allowed: {sorted(allowed)}", where)


def _build(cls, d: dict, where: str):
    _reject_unknown(d, _field_names(cls), where)
    try:
        return cls(**d)
    except ConfigError as exc:
        if exc.field and not exc.field.startswith(where):
            raise ConfigError(str(exc).split(": ", 1)[-1], f"{where}.{exc.field}") from exc
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), where) from exc


def _seed(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value < 2 ** 64:
        raise ConfigError(f"must be an unsigned 64-bit integer, got {value!r}", where)
    return value


@dataclass
class ModelSection:
    kind: str
    bilstm: BiLstmSpec
    cnn_gru: CnnGruSpec
    seed: int
    input_shape: Optional[tuple] = None
    n_classes: Optional[int] = None

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "seed": self.seed, "bilstm": dataclasses.asdict(self.bilstm),
             "cnn_gru": dataclasses.asdict(self.cnn_gru)}
        d["cnn_gru"]["blocks"] = [dataclasses.asdict(b) for b in self.cnn_gru.blocks]
        if self.input_shape is not None:
            d["input_shape"] = list(self.input_shape)
        if self.n_classes is not None:
            d["n_classes"] = self.n_classes
        return d


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str
    dataset_path: Optional[str]
    synth: Optional[SynthConfig]
    preprocessing: list
    model: ModelSection
    training: TrainConfig
    source: Optional[str] = None

    @property
    def pipeline(self) -> Pipeline:
        return Pipeline(self.preprocessing)

    def to_dict(self) -> dict:
        """Fully materialised form; parsing it back yields an equal config."""
        dataset = ({"path": self.dataset_path} if self.dataset_path is not None
                   else {"synth": self.synth.to_dict()})
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dataset": dataset,
            "preprocessing": [s.to_dict() for s in self.preprocessing],
            "model": self.model.to_dict(),
            "training": dataclasses.asdict(self.training),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _parse_model(raw: dict, seed: int, override: bool) -> ModelSection:
    _reject_unknown(raw, MODEL_KEYS, "model")
    if raw.get("kind") not in KINDS:
        raise ConfigError(f"must be one of {list(KINDS)}, got {raw.get('kind')!r}", "model.kind")
    bilstm = _build(BiLstmSpec, raw.get("bilstm", {}), "model.bilstm")
    cg = dict(raw.get("cnn_gru", {}))
    _reject_unknown(cg, _field_names(CnnGruSpec), "model.cnn_gru")
    if "blocks" in cg:
        if not isinstance(cg["blocks"], list) or not cg["blocks"]:
            raise ConfigError("must be a non-empty list", "model.cnn_gru.blocks")
        cg["blocks"] = tuple(_build(ConvBlock, b, f"model.cnn_gru.blocks[{i}]")
                             for i, b in enumerate(cg["blocks"]))
    cnn_gru = _build(CnnGruSpec, cg, "model.cnn_gru")
    mseed = seed if override or "seed" not in raw else _seed(raw["seed"], "model.seed")
    shape = raw.get("input_shape")
    return ModelSection(kind=raw["kind"], bilstm=bilstm, cnn_gru=cnn_gru, seed=mseed,
                        input_shape=tuple(shape) if shape is not None else None,
                        n_classes=raw.get("n_classes"))


def parse_config(raw: dict, seed_override: Optional[int] = None,
                 source: Optional[str] = None) -> ExperimentConfig:
    """Validate a decoded config object; errors name the offending field."""
    _reject_unknown(raw, TOP_KEYS, "config")
    override = seed_override is not None
    seed = _seed(seed_override if override else raw.get("seed", 0), "seed")
    output_dir = raw.get("output_dir", "runs/default")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("must be a non-empty string", "output_dir")

    if "dataset" not in raw:
        raise ConfigError("required: give either 'path' or 'synth'", "dataset")
    ds = raw["dataset"]
    _reject_unknown(ds, ("path", "synth"), "dataset")
    if ("path" in ds) == ("synth" in ds):
        raise ConfigError("give exactly one of 'path' and 'synth'", "dataset")
    path, synth = None, None
    if "path" in ds:
        if not isinstance(ds["path"], str) or not ds["path"]:
            raise ConfigError("must be a non-empty string", "dataset.path")
        path = ds["path"]
    else:
        sraw = dict(ds["synth"]) if isinstance(ds["synth"], dict) else ds["synth"]
        _reject_unknown(sraw, _field_names(SynthConfig), "dataset.synth")
        if override or "seed" not in sraw:
            sraw["seed"] = seed
        synth = _build(SynthConfig, sraw, "dataset.synth")

    steps = parse_steps(raw.get("preprocessing", []))
    Pipeline(steps)

    if "model" not in raw:
        raise ConfigError("required", "model")
    model = _parse_model(raw["model"], seed, override)

    traw = dict(raw.get("training", {}))
    _reject_unknown(traw, _field_names(TrainConfig), "training")
    if override or "seed" not in traw:
        traw["seed"] = seed
    training = _build(TrainConfig, traw, "training")

    return ExperimentConfig(seed=seed, output_dir=output_dir, dataset_path=path, synth=synth,
                            preprocessing=steps, model=model, training=training, source=source)


def load_config(path, seed_override: Optional[int] = None) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"no such file: {p}", "--config")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno}: {exc.msg}", "--config") from exc
    return parse_config(raw, seed_override, source=str(p))
