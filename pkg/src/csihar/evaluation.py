"""Confusion matrices, per-class and macro metrics, and inference benchmarks."""

from __future__ import annotations

import csv
import io
import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from csihar import autodiff as ad
from csihar.errors import ContractError
from csihar.models.core import Model, activation_elements

CORNER = "true\\pred"


@dataclass
class ConfusionMatrix:
    """Counts with rows = true class and columns = predicted class."""

    counts: np.ndarray
    classes: tuple

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def confusion(predictions, labels, k: int, classes: Optional[Sequence[str]] = None):
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise ContractError(f"{pred.size} predictions for {true.size} labels")
    for name, arr in (("prediction", pred), ("label", true)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ContractError(f"{name} index outside 0..{k - 1}")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    names = tuple(classes) if classes is not None else tuple(str(i) for i in range(k))
    if len(names) != k:
        raise ContractError(f"{len(names)} class names for {k} classes")
    return ConfusionMatrix(counts, names)


@dataclass
class Metrics:
    """All rates are percentages.  ``undefined`` lists zero-denominator cases."""

    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    undefined: list = field(default_factory=list)


def _ratio(num, den, what, names, undefined):
    out = np.zeros(len(num))
    for i, (a, b) in enumerate(zip(num, den)):
        if b == 0:
            undefined.append(f"{what}[{names[i]}]")
        else:
            out[i] = 100.0 * a / b
    return out


def metrics(cm: ConfusionMatrix) -> Metrics:
    """Per-class precision/recall/F1 with unweighted macro averages.

    Zero denominators yield 0 and are recorded in ``undefined``.
    """
    if cm.total <= 0:
        raise ContractError("metrics need at least one evaluated sample")
    c = cm.counts
    tp = np.diag(c).astype(np.float64)
    undefined: list = []
    precision = _ratio(tp, c.sum(axis=0), "precision", cm.classes, undefined)
    recall = _ratio(tp, c.sum(axis=1), "recall", cm.classes, undefined)
    f1 = np.zeros(len(tp))
    for i, (p, r) in enumerate(zip(precision, recall)):
        if p + r == 0:
            undefined.append(f"f1[{cm.classes[i]}]")
        else:
            f1[i] = 2 * p * r / (p + r)
    return Metrics(
        accuracy=100.0 * tp.sum() / cm.total,
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        undefined=undefined,
    )


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkResult:
    mean_ms: float
    median_ms: float
    p95_ms: float
    memory_mb: float
    repetitions: int
    warmup: int
    param_bytes: int
    activation_bytes: int
    dtype: str


def memory_footprint(model: Model, batch: int = 1) -> tuple:
    """``(parameter bytes, peak activation bytes)`` for ``batch`` samples."""
    itemsize = np.dtype(model.dtype).itemsize
    return model.param_count * itemsize, activation_elements(model.config, batch) * itemsize


def benchmark_inference(model: Model, input_shape=None, repetitions: int = 30, warmup: int = 5,
                        seed: int = 0) -> BenchmarkResult:
    """Time single-sample forward passes; memory is analytic, in units of 10^6 bytes."""
    if repetitions < 30:
        raise ContractError(f"need at least 30 timed repetitions, got {repetitions}")
    if warmup < 5:
        raise ContractError(f"need at least 5 warm-up runs, got {warmup}")
    shape = tuple(input_shape) if input_shape is not None else model.config.input_shape
    if shape != model.config.input_shape:
        raise ContractError(f"input shape {shape} differs from model input {model.config.input_shape}")
    x = np.random.Generator(np.random.PCG64(seed)).standard_normal((1,) + shape).astype(model.dtype)
    times = []
    with ad.no_grad():
        for i in range(warmup + repetitions):
            t0 = time.perf_counter()
            model.forward(x)
            dt = time.perf_counter() - t0
            if i >= warmup:
                times.append(dt * 1e3)
    pbytes, abytes = memory_footprint(model)
    return BenchmarkResult(
        mean_ms=statistics.fmean(times),
        median_ms=statistics.median(times),
        p95_ms=float(np.percentile(times, 95)),
        memory_mb=(pbytes + abytes) / 1e6,
        repetitions=repetitions,
        warmup=warmup,
        param_bytes=pbytes,
        activation_bytes=abytes,
        dtype=str(np.dtype(model.dtype)),
    )


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    metrics: Metrics
    confusion: ConfusionMatrix
    name: str = ""
    benchmark: Optional[BenchmarkResult] = None


def evaluate(model: Model, x, y, classes: Sequence[str], name: str = "") -> EvalReport:
    pred = model.predict_proba(x).argmax(axis=1)
    cm = confusion(pred, y, len(classes), classes)
    return EvalReport(metrics=metrics(cm), confusion=cm, name=name)


def _r4(v: float) -> str:
    return f"{round(float(v), 4) + 0.0:.4f}"


def report_to_dict(report: EvalReport) -> dict:
    m = report.metrics
    out = {
        "name": report.name,
        "classes": list(report.confusion.classes),
        "total": report.confusion.total,
        "accuracy": _r4(m.accuracy),
        "macro_precision": _r4(m.macro_precision),
        "macro_recall": _r4(m.macro_recall),
        "macro_f1": _r4(m.macro_f1),
        "per_class": {
            name: {"precision": _r4(p), "recall": _r4(r), "f1": _r4(f),
                   "support": int(s)}
            for name, p, r, f, s in zip(report.confusion.classes, m.precision, m.recall, m.f1,
                                        report.confusion.support)
        },
        "undefined": list(m.undefined),
    }
    if report.benchmark is not None:
        b = report.benchmark
        out["benchmark"] = {"mean_ms": _r4(b.mean_ms), "median_ms": _r4(b.median_ms),
                            "p95_ms": _r4(b.p95_ms), "memory_mb": _r4(b.memory_mb),
                            "repetitions": b.repetitions, "dtype": b.dtype}
    return out


def confusion_csv(cm: ConfusionMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([CORNER] + list(cm.classes))
    for name, row in zip(cm.classes, cm.counts):
        w.writerow([name] + [int(v) for v in row])
    return buf.getvalue()


def export_report(report: EvalReport, path, fmt: str = "json") -> list:
    """Write ``metrics.json`` and/or ``confusion.csv`` under directory ``path``.

    ``fmt`` is ``"json"`` (both files), or ``"csv"`` (confusion matrix only).
    Numbers are rendered with four decimals so identical reports give
    identical bytes.
    """
    if fmt not in ("json", "csv"):
        raise ValueError(f"format must be 'json' or 'csv', got {fmt!r}")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt == "json":
        p = out / "metrics.json"
        p.write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n",
                     encoding="utf-8")
        written.append(p)
    p = out / "confusion.csv"
    p.write_text(confusion_csv(report.confusion), encoding="utf-8")
    written.append(p)
    return written


def read_metrics(path) -> dict:
    """Parse an exported ``metrics.json`` (file or directory) back to floats."""
    p = Path(path)
    if p.is_dir():
        p = p / "metrics.json"
    d = json.loads(p.read_text(encoding="utf-8"))
    for key in ("accuracy", "macro_precision", "macro_recall", "macro_f1"):
        d[key] = float(d[key])
    for cls in d["per_class"].values():
        for key in ("precision", "recall", "f1"):
            cls[key] = float(cls[key])
    if "benchmark" in d:
        for key in ("mean_ms", "median_ms", "p95_ms", "memory_mb"):
            d["benchmark"][key] = float(d["benchmark"][key])
    return d


def read_confusion_csv(path) -> ConfusionMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    classes = tuple(rows[0][1:])
    counts = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
    return ConfusionMatrix(counts, classes)


COMPARE_COLUMNS = (("Accuracy(%)", "accuracy"), ("Precision(%)", "macro_precision"),
                   ("Recall(%)", "macro_recall"), ("F1-Score(%)", "macro_f1"))


def compare_reports(a: dict, b: dict) -> str:
    """Side-by-side CSV table in the Accuracy/Precision/Recall/F1 layout; delta = B - A."""
    if list(a["classes"]) != list(b["classes"]):
        raise ContractError(f"class rosters differ: {a['classes']} vs {b['classes']}")
    cols = list(COMPARE_COLUMNS)
    if "benchmark" in a and "benchmark" in b:
        cols += [("Latency mean(ms)", ("benchmark", "mean_ms")),
                 ("Memory(MB)", ("benchmark", "memory_mb"))]

    def get(d, key):
        return d[key[0]][key[1]] if isinstance(key, tuple) else d[key]

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Model"] + [c for c, _ in cols])
    w.writerow([f"A:{a.get('name') or 'A'}"] + [_r4(get(a, k)) for _, k in cols])
    w.writerow([f"B:{b.get('name') or 'B'}"] + [_r4(get(b, k)) for _, k in cols])
    w.writerow(["Delta(B-A)"] + [_r4(get(b, k) - get(a, k)) for _, k in cols])
    return buf.getvalue()
