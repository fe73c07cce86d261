"""Declarative preprocessing pipelines built from a registry of named steps.

A pipeline is a list of ``{"step": name, **params}`` mappings.  Sample steps
map one [channels x time] array to another; ``sliding_window`` expands each
sample into several and is therefore only valid at dataset level.
"""

from __future__ import annotations

import inspect
from dataclasses import dataclass
from typing import Callable

import numpy as np

from csihar import dsp
from csihar.data import CsiSample, Dataset
from csihar.errors import ConfigError


def _highpass(x, cutoff_hz=2.0, sample_rate_hz=100.0):
    return dsp.highpass(x, dsp.FilterSpec(cutoff_hz=cutoff_hz, sample_rate_hz=sample_rate_hz))


def _normalize(x, mode="amplitude_zscore"):
    return dsp.normalize(x, mode)


def _doppler(x, fft_size=64, hop=32):
    return dsp.doppler_spectrogram(x, dsp.SpectrogramSpec(fft_size=fft_size, hop=hop))


def _log_scale(x):
    return np.log1p(np.abs(x))


def _haar(x, levels=1):
    return dsp.haar_dwt(x, levels).approx


def _fourier(x, bins=None):
    mag = np.abs(dsp.dft(x - x.mean(axis=-1, keepdims=True)))[..., : x.shape[-1] // 2 + 1]
    return mag if bins is None else mag[..., :bins]


SAMPLE_STEPS: dict = {
    "highpass": _highpass,
    "normalize": _normalize,
    "doppler": _doppler,
    "log_scale": _log_scale,
    "haar": _haar,
    "fourier": _fourier,
}
DATASET_STEPS = {"sliding_window": ("length", "stride")}


@dataclass(frozen=True)
class Step:
    name: str
    params: dict

    def to_dict(self) -> dict:
        return {"step": self.name, **self.params}


def _defaults(fn: Callable) -> dict:
    sig = inspect.signature(fn)
    return {k: p.default for k, p in list(sig.parameters.items())[1:]}


def parse_steps(raw) -> list:
    """Validate a step list, materialising every default parameter."""
    if not isinstance(raw, list):
        raise ConfigError("must be a list of step objects", "preprocessing")
    steps = []
    for i, entry in enumerate(raw):
        where = f"preprocessing[{i}]"
        if isinstance(entry, Step):
            entry = entry.to_dict()
        if not isinstance(entry, dict) or "step" not in entry:
            raise ConfigError("each step needs a 'step' name", where)
        name = entry["step"]
        params = {k: v for k, v in entry.items() if k != "step"}
        if name in SAMPLE_STEPS:
            allowed = _defaults(SAMPLE_STEPS[name])
        elif name in DATASET_STEPS:
            allowed = {k: None for k in DATASET_STEPS[name]}
            missing = [k for k in allowed if k not in params]
            if missing:
                raise ConfigError(f"missing {missing}", f"{where}.{name}")
        else:
            known = sorted(SAMPLE_STEPS) + sorted(DATASET_STEPS)
            raise ConfigError(f"unknown step {name!r}; known: {known}", f"{where}.step")
        unknown = sorted(set(params) - set(allowed))
        if unknown:
            raise ConfigError(f"unknown parameter(s) {unknown}", f"{where}.{name}")
        steps.append(Step(name, {**allowed, **params}))
    return steps


class Pipeline:
    def __init__(self, steps=()):
        self.steps = parse_steps([s.to_dict() if isinstance(s, Step) else s for s in steps])
        # constructing the spec objects surfaces invalid parameters early
        for i, s in enumerate(self.steps):
            try:
                if s.name == "highpass":
                    dsp.FilterSpec(**s.params)
                elif s.name == "doppler":
                    dsp.SpectrogramSpec(**s.params)
                elif s.name == "sliding_window":
                    dsp.WindowSpec(**s.params)
                elif s.name == "normalize" and s.params["mode"] not in dsp.NORMALIZE_MODES:
                    raise ConfigError(f"unknown mode {s.params['mode']!r}", "mode")
            except ConfigError as exc:
                raise ConfigError(str(exc), f"preprocessing[{i}]") from exc

    def to_list(self) -> list:
        return [s.to_dict() for s in self.steps]

    @property
    def expands(self) -> bool:
        return any(s.name in DATASET_STEPS for s in self.steps)

    def apply_sample(self, x) -> np.ndarray:
        out = np.asarray(x, dtype=np.float64)
        for s in self.steps:
            if s.name in DATASET_STEPS:
                raise ConfigError(f"{s.name} changes the sample count; apply it to a dataset",
                                  "preprocessing")
            out = SAMPLE_STEPS[s.name](out, **s.params)
        return out.astype(np.float32)

    def output_shape(self, shape) -> tuple:
        probe = np.zeros(shape)
        for s in self.steps:
            if s.name == "sliding_window":
                probe = probe[..., : s.params["length"]]
            else:
                probe = SAMPLE_STEPS[s.name](probe, **s.params)
        return probe.shape

    def apply_dataset(self, dataset: Dataset) -> Dataset:
        """Return a new dataset with every step applied; the input is left untouched."""
        if not self.steps:
            return dataset
        splits = {}
        for split in dataset.split_names():
            samples = dataset.splits[split]
            for s in self.steps:
                if s.name == "sliding_window":
                    spec = dsp.WindowSpec(**s.params)
                    expanded = []
                    for smp in samples:
                        for off, seg in dsp.sliding_windows(smp.tensor, spec):
                            expanded.append(CsiSample(seg, smp.label, f"{smp.source_id}@{off}"))
                    samples = expanded
                else:
                    fn = SAMPLE_STEPS[s.name]
                    samples = [CsiSample(fn(np.asarray(smp.tensor, dtype=np.float64), **s.params),
                                         smp.label, smp.source_id) for smp in samples]
            splits[split] = [CsiSample(np.asarray(smp.tensor, dtype=np.float32), smp.label,
                                       smp.source_id) for smp in samples]
        shape = self.output_shape(dataset.shape)
        provenance = dict(dataset.provenance)
        provenance["preprocessing"] = list(provenance.get("preprocessing", [])) + self.to_list()
        return Dataset(name=dataset.name, classes=dataset.classes, splits=splits, shape=shape,
                       provenance=provenance)
