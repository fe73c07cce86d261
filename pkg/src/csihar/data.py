"""CSI datasets: in-memory model, on-disk interchange format, synthetic generator.

On-disk layout is a directory holding ``manifest.json`` and one
``<split>.bin`` per split.  Each binary file stores its samples back to back
as little-endian float32, row-major [sample][channel][time].  The manifest's
``shape`` may carry more than two axes (e.g. antenna pairs x subcarriers x
time); every axis but the last is flattened into channels on load.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
import tempfile
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from csihar.errors import ConfigError, FormatVersionError, IntegrityError

FORMAT_VERSION = 1
SAMPLE_DTYPE = np.dtype("<f4")
SPLIT_ORDER = ("train", "val", "test")

NTU_FI_CLASSES = ("Clean", "Fall", "Run", "Walk", "Jump", "Circle")
UT_HAR_CLASSES = tuple(f"Class {i}" for i in range(6))


@dataclass(frozen=True)
class CsiSample:
    tensor: np.ndarray
    label: int
    source_id: str


@dataclass
class Dataset:
    """Named train/val/test splits of equally shaped samples."""

    name: str
    classes: tuple
    splits: dict
    shape: tuple
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.shape = tuple(int(s) for s in self.shape)
        k = len(self.classes)
        seen = {}
        for split, samples in self.splits.items():
            for s in samples:
                if s.tensor.shape != self.shape:
                    raise IntegrityError(
                        f"{split}/{s.source_id}: shape {s.tensor.shape} differs from {self.shape}")
                if not 0 <= s.label < k:
                    raise IntegrityError(f"{split}/{s.source_id}: label {s.label} outside 0..{k - 1}")
                other = seen.setdefault(s.source_id, split)
                if other != split:
                    raise IntegrityError(f"source_id {s.source_id!r} appears in {other} and {split}")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def split_names(self) -> list:
        known = [s for s in SPLIT_ORDER if s in self.splits]
        return known + sorted(s for s in self.splits if s not in SPLIT_ORDER)

    def arrays(self, split: str, dtype=np.float64):
        """Stack a split into ``(X [N x C x T], y [N])``."""
        if split not in self.splits:
            raise KeyError(f"dataset {self.name!r} has no {split!r} split")
        samples = self.splits[split]
        x = np.empty((len(samples),) + self.shape, dtype=dtype)
        for i, s in enumerate(samples):
            x[i] = s.tensor
        y = np.array([s.label for s in samples], dtype=np.int64)
        return x, y

    def class_counts(self) -> dict:
        """``{split: [count per class]}``."""
        out = {}
        for split in self.split_names():
            counts = [0] * self.n_classes
            for s in self.splits[split]:
                counts[s.label] += 1
            out[split] = counts
        return out

    def counts_table(self) -> str:
        splits = self.split_names()
        header = ["Activity"] + [f"{s.capitalize()} Instances" for s in splits]
        counts = self.class_counts()
        rows = [[name] + [str(counts[s][c]) for s in splits] for c, name in enumerate(self.classes)]
        rows.append(["Total"] + [str(sum(counts[s])) for s in splits])
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        fmt = lambda r: "  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip()
        return "\n".join([fmt(header)] + [fmt(r) for r in rows])


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic CSI generator.

    Class ``c`` carries tones at ``base_freq_hz * (c + 1)`` and twice that,
    the second at half amplitude, on top of a 0.2 Hz drift and per-channel
    offsets.  Counts are per class.
    """

    n_classes: int = 6
    per_class_train: int = 156
    per_class_val: int = 44
    per_class_test: int = 0
    channels: int = 342
    time: int = 500
    sample_rate_hz: float = 100.0
    noise_std: float = 0.5
    seed: int = 42
    base_freq_hz: float = 3.0
    name: str = "synthetic"
    class_names: Optional[tuple] = None

    def __post_init__(self):
        for key in ("n_classes", "channels", "time"):
            if getattr(self, key) < 1:
                raise ConfigError("must be >= 1", key)
        for key in ("per_class_train", "per_class_val", "per_class_test"):
            if getattr(self, key) < 0:
                raise ConfigError("must be >= 0", key)
        if self.noise_std < 0:
            raise ConfigError("must be >= 0", "noise_std")
        if self.sample_rate_hz <= 0 or self.base_freq_hz <= 0:
            raise ConfigError("frequencies must be positive", "sample_rate_hz")
        if 2 * self.base_freq_hz * self.n_classes >= self.sample_rate_hz / 2:
            raise ConfigError(
                f"highest tone {2 * self.base_freq_hz * self.n_classes} Hz reaches Nyquist "
                f"{self.sample_rate_hz / 2} Hz", "base_freq_hz")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("must be an unsigned 64-bit integer", "seed")
        if self.class_names is not None:
            object.__setattr__(self, "class_names", tuple(self.class_names))
            if len(self.class_names) != self.n_classes:
                raise ConfigError(f"{len(self.class_names)} names for {self.n_classes} classes",
                                  "class_names")

    def class_frequency(self, label: int) -> float:
        return self.base_freq_hz * (label + 1)

    def classes(self) -> tuple:
        if self.class_names is not None:
            return self.class_names
        if self.n_classes == len(NTU_FI_CLASSES):
            return NTU_FI_CLASSES
        return tuple(f"Class {i}" for i in range(self.n_classes))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_names"] = list(self.class_names) if self.class_names is not None else None
        return d


DRIFT_HZ = 0.2


def _tone(t: np.ndarray, freq: float, phase: np.ndarray) -> np.ndarray:
    # sin(wt + p) = sin(wt) cos(p) + cos(wt) sin(p), as two outer products
    w = 2 * np.pi * freq * t
    return np.cos(phase) * np.sin(w) + np.sin(phase) * np.cos(w)


def _synth_sample(rng: np.random.Generator, cfg: SynthConfig, label: int) -> np.ndarray:
    t = np.arange(cfg.time) / cfg.sample_rate_hz
    f = cfg.class_frequency(label)
    c = cfg.channels
    gain = rng.uniform(0.75, 1.25, size=(c, 1))
    offset = rng.uniform(1.0, 3.0, size=(c, 1))
    ph = rng.uniform(0.0, 2.0 * np.pi, size=(c, 3))
    x = (_tone(t, f, ph[:, :1]) + 0.5 * _tone(t, 2 * f, ph[:, 1:2])
         + 0.5 * _tone(t, DRIFT_HZ, ph[:, 2:3]))
    x = offset + gain * x
    if cfg.noise_std > 0:
        x += cfg.noise_std * rng.standard_normal(size=x.shape, dtype=np.float32)
    return x.astype(np.float32)


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Generate a dataset as a pure function of ``cfg`` (PCG64 seeded by ``cfg.seed``)."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    splits = {}
    per_split = [("train", cfg.per_class_train), ("val", cfg.per_class_val),
                 ("test", cfg.per_class_test)]
    for split, n in per_split:
        if split == "test" and n == 0:
            continue
        samples = []
        for label in range(cfg.n_classes):
            for i in range(n):
                samples.append(CsiSample(_synth_sample(rng, cfg, label), label,
                                         f"{split}-c{label}-{i:05d}"))
        splits[split] = samples
    return Dataset(name=cfg.name, classes=cfg.classes(), splits=splits,
                   shape=(cfg.channels, cfg.time),
                   provenance={"synthetic": cfg.to_dict(), "preprocessing": []})


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def _allocate(n: int, ratios: Sequence[float]) -> list:
    """Largest-remainder allocation of ``n`` items to ``ratios``."""
    exact = [r * n for r in ratios]
    base = [math.floor(e) for e in exact]
    rest = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return base


def stratified_split(samples: Sequence[CsiSample], ratios: Mapping, seed: int) -> dict:
    """Partition samples per class into named splits.

    ``ratios`` maps split name to either a fraction (all fractions summing to
    1) or an integer per-class count.  Within each class the samples are
    shuffled with a generator seeded by ``seed`` before allocation.
    """
    names = list(ratios)
    values = [ratios[n] for n in names]
    as_counts = all(isinstance(v, (int, np.integer)) and not isinstance(v, bool) for v in values)
    if not as_counts and abs(sum(values) - 1.0) > 1e-9:
        raise ConfigError(f"ratios sum to {sum(values)}, expected 1", "ratios")
    by_class = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    rng = np.random.Generator(np.random.PCG64(seed))
    out = {n: [] for n in names}
    for label in sorted(by_class):
        members = by_class[label]
        perm = rng.permutation(len(members))
        if as_counts:
            alloc = list(values)
            if sum(alloc) > len(members):
                warnings.warn(f"class {label}: {len(members)} samples cannot fill counts {alloc}",
                              stacklevel=2)
                alloc = _allocate(len(members), [v / sum(values) for v in values])
        else:
            alloc = _allocate(len(members), values)
            if len(members) < len(names):
                warnings.warn(f"class {label} has only {len(members)} samples for "
                              f"{len(names)} splits", stacklevel=2)
        start = 0
        for name, count in zip(names, alloc):
            out[name].extend(members[i] for i in perm[start:start + count])
            start += count
    return out


# ---------------------------------------------------------------------------
# interchange format
# ---------------------------------------------------------------------------

def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def atomic_write_dir(path: Path, write) -> None:
    """Populate a temporary sibling directory via ``write(tmp)`` then swap it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        write(tmp)
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def save_dataset(dataset: Dataset, path) -> None:
    def write(tmp: Path):
        manifest = {
            "format_version": FORMAT_VERSION,
            "name": dataset.name,
            "classes": list(dataset.classes),
            "shape": list(dataset.shape),
            "dtype": "float32-le",
            "provenance": dataset.provenance,
            "splits": {},
        }
        for split in dataset.split_names():
            samples = dataset.splits[split]
            fname = f"{split}.bin"
            with open(tmp / fname, "wb") as fh:
                for s in samples:
                    fh.write(np.ascontiguousarray(s.tensor, dtype=SAMPLE_DTYPE).tobytes())
            manifest["splits"][split] = {
                "file": fname,
                "count": len(samples),
                "labels": [int(s.label) for s in samples],
                "source_ids": [s.source_id for s in samples],
            }
        text = json.dumps(manifest, indent=2, sort_keys=True, default=_json_default)
        (tmp / "manifest.json").write_text(text + "\n", encoding="utf-8")

    atomic_write_dir(Path(path), write)


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no manifest.json in {path}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"{mpath}: format_version {version!r}, supported {FORMAT_VERSION}")
    return manifest


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = read_manifest(path)
    declared = [int(s) for s in manifest["shape"]]
    if len(declared) < 2:
        raise IntegrityError(f"shape {declared} needs at least [channels, time]")
    shape = (int(np.prod(declared[:-1])), declared[-1])
    per_sample = shape[0] * shape[1] * SAMPLE_DTYPE.itemsize
    splits = {}
    for split, entry in manifest["splits"].items():
        count = int(entry["count"])
        labels, ids = entry["labels"], entry["source_ids"]
        if len(labels) != count or len(ids) != count:
            raise IntegrityError(f"{split}: index lists do not match count {count}")
        raw = (path / entry["file"]).read_bytes()
        expected = count * per_sample
        if len(raw) != expected:
            raise IntegrityError(
                f"{split}: {entry['file']} holds {len(raw)} bytes, expected {expected}")
        arr = np.frombuffer(raw, dtype=SAMPLE_DTYPE).reshape((count,) + shape)
        splits[split] = [CsiSample(arr[i].astype(np.float32), int(labels[i]), str(ids[i]))
                         for i in range(count)]
    return Dataset(name=manifest["name"], classes=tuple(manifest["classes"]), splits=splits,
                   shape=shape, provenance=manifest.get("provenance", {}))


def directory_digest(path) -> str:
    """SHA-256 over file names and contents, for reproducibility checks."""
    h = hashlib.sha256()
    root = Path(path)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
