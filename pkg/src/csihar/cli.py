"""``csihar`` command line: synth, inspect, preprocess, train, eval, bench, compare.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
4 numerical failure (training divergence).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from csihar import evaluation as ev
from csihar.config import ExperimentConfig, load_config
from csihar.data import (SPLIT_ORDER, Dataset, load_dataset, read_manifest, save_dataset,
                         synth_generate)
from csihar.errors import (ConfigError, ContractError, FormatVersionError, IntegrityError,
                           NumericalError)
from csihar.models import ModelConfig, build_model, load_checkpoint
from csihar.pipeline import Pipeline, parse_steps
from csihar.training import TrainingDiverged, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL = 0, 2, 3, 4

logger = logging.getLogger("csihar")


class UsageError(ConfigError):
    pass


def _say(args, *lines) -> None:
    if not args.quiet:
        for line in lines:
            print(line)


def _require_config(args) -> ExperimentConfig:
    if not args.config:
        raise UsageError(f"{args.command} needs --config")
    return load_config(args.config, args.seed)


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _out_dir(args, cfg: Optional[ExperimentConfig], default_leaf: str) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is None:
        raise UsageError(f"{args.command} needs --out")
    return Path(cfg.output_dir) / default_leaf


def _source_dataset(args, cfg: Optional[ExperimentConfig]) -> Dataset:
    if getattr(args, "dataset", None):
        return load_dataset(_existing(args.dataset, "dataset directory"))
    if cfg is None:
        raise UsageError(f"{args.command} needs --dataset or --config")
    if cfg.dataset_path is not None:
        return load_dataset(_existing(cfg.dataset_path, "dataset.path"))
    return synth_generate(cfg.synth)


def pending_steps(applied: list, steps: list) -> list:
    """Steps of ``steps`` not yet covered by the already ``applied`` ones.

    ``applied`` (a dataset's recorded preprocessing) must be a prefix of
    ``steps``; anything else means the data was prepared for another pipeline.
    """
    wanted = [s.to_dict() for s in parse_steps(steps)]
    applied = list(applied)
    if applied != wanted[: len(applied)]:
        raise ConfigError(f"dataset was preprocessed with {applied}, which is not a prefix of "
                          f"{wanted}", "preprocessing")
    return wanted[len(applied):]


def _prepared(dataset: Dataset, steps: list) -> Dataset:
    applied = dataset.provenance.get("preprocessing", [])
    return Pipeline(pending_steps(applied, steps)).apply_dataset(dataset)


def _model_config(cfg: ExperimentConfig, dataset: Dataset) -> ModelConfig:
    m = cfg.model
    shape = tuple(dataset.shape)
    if m.input_shape is not None and tuple(m.input_shape) != shape:
        raise ConfigError(f"{list(m.input_shape)} differs from the prepared data {list(shape)}",
                          "model.input_shape")
    if m.n_classes is not None and m.n_classes != dataset.n_classes:
        raise ConfigError(f"{m.n_classes} differs from the dataset's {dataset.n_classes}",
                          "model.n_classes")
    return ModelConfig(kind=m.kind, input_shape=shape, n_classes=dataset.n_classes,
                       bilstm=m.bilstm, cnn_gru=m.cnn_gru, seed=m.seed)


def _declared_shape(cfg: ExperimentConfig) -> tuple:
    if cfg.dataset_path is not None:
        manifest = read_manifest(_existing(cfg.dataset_path, "dataset.path"))
        raw = manifest["shape"]
        shape = (int(np.prod(raw[:-1])), int(raw[-1]))
        applied = manifest.get("provenance", {}).get("preprocessing", [])
        return Pipeline(pending_steps(applied, cfg.preprocessing)).output_shape(shape)
    return Pipeline(cfg.preprocessing).output_shape((cfg.synth.channels, cfg.synth.time))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _require_config(args)
    if cfg.synth is None:
        raise UsageError("synth needs a config whose dataset block is 'synth'")
    out = _out_dir(args, cfg, "dataset")
    ds = synth_generate(cfg.synth)
    save_dataset(ds, out)
    _say(args, ds.counts_table(), f"wrote {out}")
    return EXIT_OK


def _synth_counts_table(cfg: ExperimentConfig) -> str:
    s = cfg.synth
    counts = {"train": s.per_class_train, "val": s.per_class_val, "test": s.per_class_test}
    splits = [k for k in SPLIT_ORDER if counts[k] > 0]
    header = ["Class"] + splits
    rows = [[name] + [str(counts[k]) for k in splits] for name in s.classes()]
    rows.append(["Total"] + [str(counts[k] * s.n_classes) for k in splits])
    width = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, width)).rstrip()  # noqa: E731
    return "\n".join([fmt(header)] + [fmt(r) for r in rows])


def cmd_inspect(args) -> int:
    if args.dataset:
        ds = load_dataset(_existing(args.dataset, "dataset directory"))
        print(ds.counts_table())
        print(f"name: {ds.name}  shape: {list(ds.shape)}  classes: {len(ds.classes)}")
        print(f"preprocessing: {json.dumps(ds.provenance.get('preprocessing', []))}")
        return EXIT_OK
    cfg = _require_config(args)
    if cfg.synth is not None:
        print(_synth_counts_table(cfg))
        print(f"name: {cfg.synth.name}  shape: {[cfg.synth.channels, cfg.synth.time]}  "
              f"model input: {list(_declared_shape(cfg))}")
        return EXIT_OK
    ds = load_dataset(_existing(cfg.dataset_path, "dataset.path"))
    print(ds.counts_table())
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = load_config(args.config, args.seed) if args.config else None
    steps = cfg.preprocessing if cfg is not None else []
    if args.steps:
        steps = json.loads(Path(_existing(args.steps, "steps file")).read_text(encoding="utf-8"))
    out = _out_dir(args, cfg, "preprocessed")
    if args.dataset and Path(args.dataset).resolve() == out.resolve():
        raise UsageError("--out must differ from the input dataset directory")
    ds = _prepared(_source_dataset(args, cfg), steps)
    save_dataset(ds, out)
    _say(args, f"shape {list(ds.shape)}", f"wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _require_config(args)
    out = _out_dir(args, cfg, "")
    dataset = _prepared(_source_dataset(args, cfg), cfg.preprocessing)
    mcfg = _model_config(cfg, dataset)
    model = build_model(mcfg)
    resolved = cfg.to_dict()
    resolved["output_dir"] = str(out)
    if args.dataset:
        resolved["dataset"] = {"path": str(args.dataset)}
    resolved["model"].update(input_shape=list(mcfg.input_shape), n_classes=mcfg.n_classes)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")
    meta = {"classes": list(dataset.classes), "dataset": dataset.name,
            "preprocessing": dataset.provenance.get("preprocessing", [])}
    _say(args, f"model {mcfg.kind}: {model.param_count} parameters, input {list(mcfg.input_shape)}")
    try:
        best, history = train(model, dataset, cfg.training, checkpoint_dir=out / "checkpoint",
                              meta=meta)
    except TrainingDiverged as exc:
        exc.history.write_csv(out / "history.csv")
        raise
    history.write_csv(out / "history.csv")
    _say(args, f"best epoch {history.best_epoch} ({history.stop_reason}), "
               f"val_acc {history.val_acc[history.best_epoch - 1]:.4f}", f"wrote {out}")
    return EXIT_OK


def _load_for_eval(args):
    ck_path = _existing(args.checkpoint, "checkpoint")
    if not (ck_path / "manifest.json").is_file():
        raise UsageError(f"checkpoint not found: {ck_path / 'manifest.json'}")
    return load_checkpoint(ck_path)


def cmd_eval(args) -> int:
    ckpt = _load_for_eval(args)
    cfg = load_config(args.config, args.seed) if args.config else None
    dataset = _source_dataset(args, cfg)
    if args.split not in dataset.splits or not dataset.splits[args.split]:
        raise UsageError(f"split {args.split!r} absent; dataset has {dataset.split_names()}")
    classes = ckpt.meta.get("classes")
    if classes is not None and list(classes) != list(dataset.classes):
        raise UsageError(f"checkpoint classes {classes} differ from dataset {list(dataset.classes)}")
    dataset = _prepared(dataset, ckpt.meta.get("preprocessing", []))
    x, y = dataset.arrays(args.split)
    model = ckpt.model
    report = ev.evaluate(model, x, y, dataset.classes, name=args.name or model.config.kind)
    if args.bench:
        report.benchmark = ev.benchmark_inference(model)
    out = Path(args.out) if args.out else Path(f"eval_{args.split}")
    ev.export_report(report, out, "json")
    m = report.metrics
    _say(args, f"accuracy {m.accuracy:.4f}  precision {m.macro_precision:.4f}  "
               f"recall {m.macro_recall:.4f}  f1 {m.macro_f1:.4f}", f"wrote {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    dtype = np.float32 if args.precision == "f32" else np.float64
    if args.checkpoint:
        model = _load_for_eval(args).model
    else:
        cfg = _require_config(args)
        shape = _declared_shape(cfg)
        n_classes = cfg.synth.n_classes if cfg.synth is not None else len(
            read_manifest(cfg.dataset_path)["classes"])
        m = cfg.model
        model = build_model(ModelConfig(kind=m.kind, input_shape=shape, n_classes=n_classes,
                                        bilstm=m.bilstm, cnn_gru=m.cnn_gru, seed=m.seed))
    model = model.astype(dtype)
    res = ev.benchmark_inference(model, repetitions=args.repetitions, warmup=args.warmup)
    row = {"kind": model.config.kind, "params": model.param_count,
           "input_shape": list(model.config.input_shape), "dtype": res.dtype,
           "mean_ms": round(res.mean_ms, 4), "median_ms": round(res.median_ms, 4),
           "p95_ms": round(res.p95_ms, 4), "memory_mb": round(res.memory_mb, 4)}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps(row, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    print(f"{row['kind']}  params {row['params']}  {res.dtype}  mean {res.mean_ms:.4f} ms  "
          f"median {res.median_ms:.4f} ms  p95 {res.p95_ms:.4f} ms  memory {res.memory_mb:.4f} MB")
    return EXIT_OK


def cmd_compare(args) -> int:
    reports = []
    for p in (args.report_a, args.report_b):
        path = _existing(p, "report")
        if path.is_dir():
            path = path / "metrics.json"
        reports.append(ev.read_metrics(_existing(path, "report")))
    try:
        table = ev.compare_reports(*reports)
    except ContractError as exc:
        raise UsageError(str(exc)) from exc
    print("# delta = B - A")
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table, encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--out", help="output directory (file for compare)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    parser = argparse.ArgumentParser(prog="csihar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", parents=[common], help="print per-class counts")
    p.add_argument("--dataset")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("preprocess", parents=[common], help="materialise a transformed dataset")
    p.add_argument("--dataset")
    p.add_argument("--steps", help="JSON file with a step list (instead of the config's)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="preprocess and train one model")
    p.add_argument("--dataset")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--split", default="val")
    p.add_argument("--name", help="report name (defaults to the model kind)")
    p.add_argument("--bench", action="store_true", help="attach a latency benchmark")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="time single-sample inference")
    p.add_argument("--checkpoint")
    p.add_argument("--precision", choices=("f32", "f64"), default="f64")
    p.add_argument("--repetitions", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("compare", parents=[common], help="side-by-side table of two reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        parser.error("--seed must be an unsigned 64-bit integer")
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, IntegrityError, FormatVersionError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
