"""Command-line front end.

Subcommands: codebook-gen, codebook-validate, codebook-stats, decode, label,
simulate, compare, calibrate, selftest. Every command is deterministic given
its flags; output files carry a metadata block (tool version, command line,
seeds) and no timestamps, so reruns are byte-identical.

Exit codes: 0 success, 1 usage error, 2 validation failure, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import codebook as cbk
from . import selftest
from .decoding import decode_batch, pixel_confidence_batch, read_probs
from .losses import LossConfig
from .metrics import bit_level_samples, ece, reliability_bins, topc_accuracy
from .pseudolabel import hybrid_label_batch
from .simulator import (
    TaskConfig,
    TrainConfig,
    TrainingDiverged,
    code_length_rule,
    compare_ecoc_vs_onehot,
    evaluate_predictions,
    make_task,
    predict_classes,
    train_pseudo_label,
    train_supervised,
    write_pgm,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class ValidationFailure(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def _command_line() -> str:
    return "ecoclab " + " ".join(sys.argv[1:])


def _meta(seed=None) -> dict:
    meta = {"tool": f"ecoclab {__version__}", "command": _command_line()}
    if seed is not None:
        meta["seed"] = seed
    return meta


def _meta_lines(seed=None) -> list[str]:
    lines = [f"# ecoclab {__version__}", f"# command: {_command_line()}"]
    if seed is not None:
        lines.append(f"# seed: {seed}")
    return lines


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def _write_csv(path: Path, header: list[str], rows, seed=None) -> None:
    lines = _meta_lines(seed) + [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_json(path: Path, payload: dict, seed=None) -> None:
    payload = {"meta": _meta(seed), **payload}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_codebook(path: str) -> cbk.Codebook:
    cb, report = cbk.load(path)
    if report:
        raise ValidationFailure(f"codebook {path} invalid: " + "; ".join(report))
    return cb


def _read_names(path: str | None) -> list[str] | None:
    if path is None:
        return None
    names = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not names:
        raise UsageError(f"names file {path} is empty")
    return names


# --------------------------------------------------------------------- codebook


def cmd_codebook_gen(args) -> int:
    names = _read_names(args.names)
    if args.strategy == "mmd":
        if args.classes is None and names is None:
            raise UsageError("mmd strategy needs --classes or --names")
        n = args.classes if args.classes is not None else len(names)
        if args.length is None:
            raise UsageError("mmd strategy needs --length")
        try:
            cb = cbk.generate_mmd(n, args.length, args.iters, seed=args.seed, class_names=names)
        except cbk.CodebookError as exc:
            raise NumericFailure(str(exc)) from exc
    elif args.strategy == "text":
        if args.embeddings is None:
            raise UsageError("text strategy needs --embeddings")
        if args.length is None:
            raise UsageError("text strategy needs --length")
        emb = cbk.read_embeddings(args.embeddings)
        try:
            cb = cbk.generate_text(emb, args.length)
        except cbk.CodebookError as exc:
            raise NumericFailure(str(exc)) from exc
    elif args.strategy == "onehot":
        if args.classes is None and names is None:
            raise UsageError("onehot strategy needs --classes or --names")
        n = args.classes if args.classes is not None else len(names)
        cb = cbk.one_hot(n, class_names=names)
    else:  # pragma: no cover - argparse restricts choices
        raise UsageError(f"unknown strategy {args.strategy}")

    report = cbk.validate(cb)
    if report:
        raise ValidationFailure("generated codebook failed validation: " + "; ".join(report))
    cbk.save(cb, args.out, meta=_meta(args.seed))
    stats = cbk.separation_stats(cb)
    print(
        f"strategy={cb.strategy} n_classes={cb.n_classes} code_length={cb.code_length} "
        f"d_min_row={stats.d_min_row} d_min_col={stats.d_min_col} d_max_col={stats.d_max_col} "
        f"d_mean_row={stats.d_mean_row:.4f} correctable_bits={stats.correctable_bits}"
    )
    return EXIT_OK


def cmd_codebook_validate(args) -> int:
    cb, report = cbk.load(args.codebook)
    if report:
        for item in report:
            print(item)
        raise ValidationFailure(f"{len(report)} invariant violation(s) in {args.codebook}")
    print(f"valid: {cb.n_classes} classes, {cb.code_length} bits, strategy={cb.strategy}")
    return EXIT_OK


def cmd_codebook_stats(args) -> int:
    cb, _ = cbk.load(args.codebook)
    stats = cbk.separation_stats(cb)
    print(
        f"n_classes={cb.n_classes} code_length={cb.code_length} "
        f"d_min_row={stats.d_min_row} d_min_col={stats.d_min_col} d_max_col={stats.d_max_col} "
        f"d_mean_row={stats.d_mean_row:.4f} correctable_bits={stats.correctable_bits}"
    )
    return EXIT_OK


# ----------------------------------------------------------------- decode/label


def cmd_decode(args) -> int:
    cb = _load_codebook(args.codebook)
    probs = read_probs(args.probs)
    if probs.shape[1] != cb.code_length:
        raise ValidationFailure(
            f"probs have {probs.shape[1]} bits, codebook expects {cb.code_length}"
        )
    classes, distances = decode_batch(cb, probs)
    conf = pixel_confidence_batch(probs)
    best = distances[np.arange(len(classes)), classes]
    rows = [
        (i, int(classes[i]), float(best[i]), float(conf[i])) for i in range(len(classes))
    ]
    _write_csv(Path(args.out), ["pixel", "class_index", "distance", "pixel_confidence"], rows)
    print(f"decoded {len(classes)} pixels -> {args.out}")
    return EXIT_OK


def cmd_label(args) -> int:
    cb = _load_codebook(args.codebook)
    probs = read_probs(args.probs)
    if probs.shape[1] != cb.code_length:
        raise ValidationFailure(
            f"probs have {probs.shape[1]} bits, codebook expects {cb.code_length}"
        )
    batch = hybrid_label_batch(cb, probs, args.threshold)
    if args.form == "hybrid":
        bits, mask, source = batch.bits, batch.mask, batch.source_class
    elif args.form == "codewise":
        bits, mask, source = batch.codewise, None, batch.source_class
    else:
        bits, mask, source = batch.bitwise, None, None

    def bitstr(row) -> str:
        return "".join(str(int(b)) for b in row)

    out = Path(args.out)
    if args.format == "jsonl":
        lines = [json.dumps({"meta": _meta()}, sort_keys=True)]
        for i in range(bits.shape[0]):
            rec = {
                "pixel": i,
                "form": args.form,
                "bits": bitstr(bits[i]),
                "mask": bitstr(mask[i]) if mask is not None else None,
                "source_class": int(source[i]) if source is not None else None,
                "pixel_confidence": float(batch.pixel_confidence[i]),
            }
            lines.append(json.dumps(rec, sort_keys=True))
        out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        rows = [
            (
                i,
                args.form,
                bitstr(bits[i]),
                bitstr(mask[i]) if mask is not None else None,
                int(source[i]) if source is not None else None,
                float(batch.pixel_confidence[i]),
            )
            for i in range(bits.shape[0])
        ]
        _write_csv(out, ["pixel", "form", "bits", "mask", "source_class", "pixel_confidence"], rows)
    print(f"labeled {bits.shape[0]} pixels ({args.form}) -> {args.out}")
    return EXIT_OK


# -------------------------------------------------------------------- simulate


def _build_dataclass(cls, doc: dict, prefix: str, errors: list[str]):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    local: list[str] = []
    kwargs = {}
    for key, value in doc.items():
        if key not in fields:
            local.append(f"{prefix}: unknown field {key!r}")
            continue
        if key == "loss" and isinstance(value, dict):
            value = _build_dataclass(LossConfig, value, f"{prefix}.loss", local)
            if value is None:
                continue
        kwargs[key] = value
    obj = None
    if not local:
        try:
            obj = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            local.append(f"{prefix}: {exc}")
    errors.extend(local)
    return obj


def _parse_run_config(path: str):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    errors: list[str] = []
    model = doc.get("model", "ecoc")
    if model not in ("ecoc", "onehot"):
        errors.append(f"model: must be 'ecoc' or 'onehot', got {model!r}")
    mode = doc.get("mode", "pseudo")
    if mode not in ("pseudo", "supervised"):
        errors.append(f"mode: must be 'pseudo' or 'supervised', got {mode!r}")
    known = {"model", "mode", "task", "train", "codebook"}
    for key in doc:
        if key not in known:
            errors.append(f"config: unknown top-level key {key!r}")
    task_cfg = _build_dataclass(TaskConfig, doc.get("task", {}), "task", errors)
    train_cfg = _build_dataclass(TrainConfig, doc.get("train", {}), "train", errors)
    cb_spec = doc.get("codebook", {})
    if not isinstance(cb_spec, dict):
        errors.append("codebook: must be an object")
        cb_spec = {}
    if errors:
        raise ValidationFailure("config schema violations:\n  " + "\n  ".join(errors))
    return model, mode, task_cfg, train_cfg, cb_spec


def _resolve_codebook(model, cb_spec, task_cfg, train_cfg) -> cbk.Codebook | None:
    if model == "onehot":
        return None
    if "path" in cb_spec:
        return _load_codebook(cb_spec["path"])
    length = cb_spec.get("length", code_length_rule(task_cfg.n_classes))
    iterations = cb_spec.get("iterations", 20_000)
    seed = cb_spec.get("seed", train_cfg.seed)
    try:
        return cbk.generate_mmd(task_cfg.n_classes, length, iterations, seed=seed)
    except cbk.CodebookError as exc:
        raise NumericFailure(str(exc)) from exc


def _metrics_rows(metrics):
    return [
        (
            metrics.steps[i],
            metrics.sup_loss[i],
            metrics.unsup_loss[i],
            metrics.bit_error[i],
            metrics.class_error[i],
            metrics.difference_count[i],
            metrics.correction_count[i],
        )
        for i in range(len(metrics.steps))
    ]


_METRICS_HEADER = [
    "step",
    "sup_loss",
    "unsup_loss",
    "pl_bit_error",
    "pl_class_error",
    "difference_count",
    "correction_count",
]


def _clean(value):
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def cmd_simulate(args) -> int:
    model_kind, mode, task_cfg, train_cfg, cb_spec = _parse_run_config(args.config)
    cb = _resolve_codebook(model_kind, cb_spec, task_cfg, train_cfg)
    task = make_task(task_cfg, train_cfg.seed)
    train = train_supervised if mode == "supervised" else train_pseudo_label
    try:
        model, metrics = train(task, train_cfg, codebook=cb)
    except TrainingDiverged as exc:
        raise NumericFailure(str(exc)) from exc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv", _METRICS_HEADER, _metrics_rows(metrics), seed=train_cfg.seed)
    pred = predict_classes(model, task.features, cb)
    grid_pred = pred.reshape(task.grid.shape)
    write_pgm(out / "grid_truth.pgm", task.grid, task_cfg.n_classes)
    write_pgm(out / "grid_pred.pgm", grid_pred, task_cfg.n_classes)
    summary = {
        "model": model_kind,
        "mode": mode,
        "final_accuracy": metrics.final_accuracy,
        "final_miou": _clean(metrics.final_miou),
        "final_per_class_accuracy": [
            _clean(float(v)) for v in metrics.final_per_class_accuracy
        ],
        "task": dataclasses.asdict(task_cfg),
        "train": dataclasses.asdict(train_cfg),
        "codebook": None if cb is None else cbk.to_dict(cb),
    }
    _write_json(out / "summary.json", summary, seed=train_cfg.seed)
    print(
        f"model={model_kind} mode={mode} accuracy={metrics.final_accuracy:.4f} "
        f"miou={metrics.final_miou:.4f} -> {out}"
    )
    return EXIT_OK


def cmd_compare(args) -> int:
    model_kind, _, task_cfg, train_cfg, cb_spec = _parse_run_config(args.config)
    if model_kind != "ecoc":
        raise UsageError("compare needs an 'ecoc' config (the one-hot side is implicit)")
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --seeds list: {exc}") from exc
    if len(seeds) < 2:
        raise UsageError("--seeds needs at least two comma-separated integers")
    cb = _resolve_codebook(model_kind, cb_spec, task_cfg, train_cfg)
    try:
        summary = compare_ecoc_vs_onehot(
            task_cfg, train_cfg, cb, seeds, max_workers=args.threads
        )
    except TrainingDiverged as exc:
        raise NumericFailure(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = summary.to_dict()
    doc["task"] = dataclasses.asdict(task_cfg)
    doc["train"] = dataclasses.asdict(train_cfg)
    doc["codebook"] = cbk.to_dict(cb)
    doc["seeds"] = seeds
    _write_json(out / "comparison.json", doc)
    _write_csv(
        out / "comparison.csv",
        ["seed", "code_accuracy", "onehot_accuracy", "code_miou", "onehot_miou"],
        [
            (r.seed, r.code_accuracy, r.onehot_accuracy, r.code_miou, r.onehot_miou)
            for r in summary.runs
        ],
    )
    print(
        f"seeds={len(seeds)} code_median={summary.code_median:.4f} "
        f"onehot_median={summary.onehot_median:.4f} win_rate={summary.win_rate:.3f} -> {out}"
    )
    return EXIT_OK


# ------------------------------------------------------------------- calibrate


def cmd_calibrate(args) -> int:
    cb = _load_codebook(args.codebook)
    probs = read_probs(args.probs)
    truth = np.loadtxt(args.truth, dtype=np.int64, comments="#").reshape(-1)
    if truth.size != probs.shape[0]:
        raise ValidationFailure(
            f"{truth.size} truth labels for {probs.shape[0]} probability rows"
        )
    if truth.min() < 0 or truth.max() >= cb.n_classes:
        raise ValidationFailure("truth labels outside the codebook's class range")
    samples = bit_level_samples(probs, cb.matrix[truth])
    bins = reliability_bins(samples, args.bins)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / "reliability.csv",
        ["bin_low", "bin_high", "count", "mean_confidence", "accuracy"],
        [
            (
                float(bins.edges[i]),
                float(bins.edges[i + 1]),
                int(bins.counts[i]),
                float(bins.mean_confidence[i]),
                float(bins.accuracy[i]),
            )
            for i in range(len(bins.counts))
        ],
    )
    _, distances = decode_batch(cb, probs)
    ranked = np.argsort(distances, axis=1, kind="stable")
    c_max = args.topc if args.topc else cb.n_classes
    if not 1 <= c_max <= cb.n_classes:
        raise UsageError(f"--topc must lie in 1..{cb.n_classes}")
    curve = topc_accuracy(ranked, truth, c_max)
    _write_csv(
        out / "topc.csv",
        ["c", "accuracy"],
        [(c + 1, float(curve[c])) for c in range(c_max)],
    )
    print(f"ece={ece(samples, args.bins):.6f} samples={len(samples)} -> {out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = selftest.run_all(seed=args.seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail}")
    if failed:
        raise NumericFailure("failing suites: " + ", ".join(r.name for r in failed))
    return EXIT_OK


# ----------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ecoclab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"ecoclab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("codebook-gen", help="generate a codebook and print its stats")
    p.add_argument("--strategy", choices=["mmd", "text", "onehot"], required=True)
    p.add_argument("--classes", type=int, default=None, help="number of classes (default: from --names)")
    p.add_argument("--names", default=None, help="file with one class name per line")
    p.add_argument("--length", type=int, default=None, help="code length K")
    p.add_argument("--iters", type=int, default=100_000, help="search iterations (default 100000)")
    p.add_argument("--seed", type=int, default=0, help="search seed (default 0)")
    p.add_argument("--embeddings", default=None, help="embedding file for the text strategy")
    p.add_argument("--out", required=True, help="output codebook JSON path")
    p.set_defaults(func=cmd_codebook_gen)

    p = sub.add_parser("codebook-validate", help="re-check a codebook file's invariants")
    p.add_argument("codebook")
    p.set_defaults(func=cmd_codebook_validate)

    p = sub.add_parser("codebook-stats", help="print separation statistics")
    p.add_argument("codebook")
    p.set_defaults(func=cmd_codebook_stats)

    p = sub.add_parser("decode", help="batch-decode probabilities to classes")
    p.add_argument("--codebook", required=True)
    p.add_argument("--probs", required=True, help=".blob or CSV probability matrix")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("label", help="produce pseudo-labels for a probability batch")
    p.add_argument("--codebook", required=True)
    p.add_argument("--probs", required=True, help=".blob or CSV probability matrix")
    p.add_argument("--form", choices=["bitwise", "codewise", "hybrid"], default="hybrid")
    p.add_argument("--threshold", type=float, default=0.95, help="mining threshold T (default 0.95)")
    p.add_argument("--format", choices=["csv", "jsonl"], default="csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("simulate", help="run one training simulation from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="paired code-vs-one-hot campaign over seeds")
    p.add_argument("--config", required=True, help="an 'ecoc' run config")
    p.add_argument("--seeds", required=True, help="comma-separated seed list")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker cap for paired runs (default: cores)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("calibrate", help="bit-level reliability bins and top-C curves")
    p.add_argument("--codebook", required=True)
    p.add_argument("--probs", required=True)
    p.add_argument("--truth", required=True, help="CSV with one true class id per pixel")
    p.add_argument("--bins", type=int, default=10, help="confidence bins (default 10)")
    p.add_argument("--topc", type=int, default=None, help="largest C for the top-C curve (default N)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("selftest", help="run the built-in property suites")
    p.add_argument("--seed", type=int, default=0, help="suite seed (default 0)")
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, OSError) as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationFailure, cbk.CodebookError, ValueError) as exc:
        print(f"error[validation]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericFailure as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
