"""Command-line entry point: ``gridvit {synth,train,eval,explain}``.

Exit codes: 0 ok, 2 config/validation, 3 I/O, 4 training abort, 5 evaluation failure.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (CLASS_NAMES, ScanRecord, SyntheticSpec, central_sample, gen_synthetic,
                   load_records, parse_manifest)
from .errors import (ConfigError, EvaluationError, FormatError, GridViTError, InsufficientDepthError,
                     TrainingAbort, ValidationError)
from .evaluation import (CVReport, FoldResult, TABLE_ROWS, aggregate_report, config_fingerprint,
                         format_table, nested_cv, stratified_holdout)
from .interpret import explain_stack, export_heatmap
from .model import FUSION_MODES, ModelConfig, forward_classify
from .training import TrainConfig, evaluate, fit

log = logging.getLogger("gridvit")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_TRAIN, EXIT_EVAL = 0, 2, 3, 4, 5


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    manifest: Path
    output_dir: Path
    mode: str = "early"
    folds: int = 10
    seed: int = 0
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: Optional[str], overrides: dict) -> "RunConfig":
        obj, base = {}, Path.cwd()
        if path:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file {path} does not exist")
            try:
                obj = json.loads(p.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
            base = p.parent
        obj.update({k: v for k, v in overrides.items() if v is not None})
        unknown = set(obj) - {"manifest", "output_dir", "mode", "folds", "seed", "model", "train"}
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        if "manifest" not in obj:
            raise ConfigError("missing required key 'manifest'")
        manifest = base / obj["manifest"]
        if not manifest.is_file():
            raise ConfigError(f"key 'manifest': {manifest} does not exist")
        mode = obj.get("mode", "early")
        if mode not in FUSION_MODES:
            raise ConfigError(f"key 'mode': {mode!r} not in {FUSION_MODES}")
        return cls(manifest=manifest, output_dir=base / obj.get("output_dir", "gridvit_out"),
                   mode=mode, folds=int(obj.get("folds", 10)), seed=int(obj.get("seed", 0)),
                   model=dict(obj.get("model", {})), train=dict(obj.get("train", {})))

    def model_config(self, records: Sequence[ScanRecord], mode: Optional[str] = None) -> ModelConfig:
        kw = dict(self.model)
        if records:
            _, h, w = records[0].t1.extents
            kw.setdefault("slice_h", h)
            kw.setdefault("slice_w", w)
        return ModelConfig.for_mode(mode or self.mode, **kw)

    def train_config(self, **overrides) -> TrainConfig:
        kw = {**self.train, **{k: v for k, v in overrides.items() if v is not None}, "seed": self.seed}
        return TrainConfig.from_dict(kw)


# ---------------------------------------------------------------------------


def _records(cfg: RunConfig) -> List[ScanRecord]:
    return load_records(parse_manifest(cfg.manifest))


def _announce_seed(seed: int) -> None:
    print(f"seed: {seed}", flush=True)


def _say(args, *msg):
    if not args.quiet:
        print(*msg, flush=True)


def cmd_synth(args) -> int:
    spec = SyntheticSpec.from_json(args.spec) if args.spec else SyntheticSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    _announce_seed(spec.seed)
    try:
        manifest, entries = gen_synthetic(spec, args.out)
    except OSError as exc:
        raise CLIError(f"cannot write synthetic data to {args.out}: {exc}", EXIT_IO) from exc
    counts = [sum(e.label == c for e in entries) for c in range(3)]
    print(f"wrote {len(entries)} cases to {manifest}")
    for c, n in enumerate(counts):
        print(f"  class {c} ({CLASS_NAMES[c]}): {n}")
    return EXIT_OK


def _overrides(args) -> dict:
    return {"manifest": args.manifest, "mode": getattr(args, "mode", None), "seed": args.seed,
            "folds": getattr(args, "folds", None)}


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, _overrides(args))
    _announce_seed(cfg.seed)
    records = _records(cfg)
    model_cfg = cfg.model_config(records)
    train_cfg = cfg.train_config(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size)
    train, val = stratified_holdout(records, train_cfg.val_fraction, seed=cfg.seed)
    _say(args, f"mode {model_cfg.mode}: {len(train)} train / {len(val)} inner-validation cases, "
               f"N={model_cfg.num_patches} patches")

    def progress(rec):
        if not args.quiet:
            va = "-" if rec.val_accuracy is None else f"{rec.val_accuracy:.3f}"
            print(f"epoch {rec.epoch:4d}  loss {rec.train_loss:.4f}  val_acc {va}", flush=True)

    try:
        params, trainlog = fit(train, val, model_cfg, train_cfg, on_epoch=progress)
    except TrainingAbort as exc:
        raise CLIError(f"training aborted: {exc}", EXIT_TRAIN) from exc
    out = Path(args.out or (cfg.output_dir / "model.gvck"))
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, model_cfg, out)
    log_path = out.with_suffix(".log.jsonl")
    trainlog.write(log_path)
    print(f"checkpoint: {out}\ntrain log: {log_path}\nbest epoch: {trainlog.best_epoch}")
    if val:
        m = evaluate(params, model_cfg, val).metrics
        print(f"inner validation: accuracy {m.accuracy:.4f}  precision {m.precision:.4f}  "
              f"recall {m.recall:.4f}")
    return EXIT_OK


def _write_report(prefix: Path, table: str, payload: dict) -> None:
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(str(prefix) + ".txt").write_text(table, encoding="utf-8")
    Path(str(prefix) + ".json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _fold_line(mode, result) -> str:
    status = f"acc {result.metrics.accuracy:.3f}" if result.ok else result.error
    return f"[{mode}] fold {result.fold}: {status}"


def cmd_eval(args) -> int:
    if not args.cv and not args.checkpoint:
        raise ConfigError("eval needs --checkpoint PATH or --cv")
    cfg = RunConfig.load(args.config, _overrides(args))
    _announce_seed(cfg.seed)
    records = _records(cfg)
    prefix = Path(args.out) if args.out else cfg.output_dir / ("cv_report" if args.cv else "eval_report")

    if args.cv:
        modes = [m.strip() for m in (args.modes or cfg.mode).split(",") if m.strip()]
        bad = [m for m in modes if m not in FUSION_MODES]
        if bad:
            raise ConfigError(f"--modes: unknown mode(s) {bad}")
        train_cfg = cfg.train_config(epochs=args.epochs)
        reports = {}
        for mode in modes:
            model_cfg = cfg.model_config(records, mode)
            _say(args, f"[{mode}] {cfg.folds}-fold nested CV on {len(records)} cases")
            reports[mode] = nested_cv(
                records, model_cfg, train_cfg, folds=cfg.folds, seed=cfg.seed, name=mode,
                on_fold=lambda r, m=mode: _say(args, _fold_line(m, r)),
            )
        try:
            rows = aggregate_report(reports)
        except EvaluationError as exc:
            raise CLIError(str(exc), EXIT_EVAL) from exc
        table = format_table(rows, cfg.folds)
        _write_report(prefix, table, {"folds": cfg.folds, "seed": cfg.seed,
                                      "reports": {k: r.to_dict() for k, r in reports.items()}})
        print(table, end="")
        print(f"report: {prefix}.txt, {prefix}.json")
        return EXIT_OK

    try:
        params, model_cfg = load_checkpoint(args.checkpoint)
    except FormatError as exc:
        raise CLIError(f"cannot load checkpoint: {exc}", EXIT_EVAL) from exc
    try:
        data_shape = central_sample(records[0], model_cfg.k, model_cfg.modalities).image.shape
    except (InsufficientDepthError, IndexError) as exc:
        raise CLIError(f"cannot build an input from the manifest: {exc}", EXIT_EVAL) from exc
    if data_shape != model_cfg.input_shape:
        raise CLIError(f"checkpoint expects input shape {model_cfg.input_shape}, "
                       f"manifest data gives {data_shape}", EXIT_EVAL)
    result = evaluate(params, model_cfg, records)
    if result.metrics is None:
        raise CLIError("no evaluable cases", EXIT_EVAL)
    report = CVReport([FoldResult(0, result.case_ids, result.metrics)],
                      config_fingerprint(model_cfg), model_cfg.mode)
    table = format_table(aggregate_report({model_cfg.mode: report}))
    payload = report.to_dict()
    payload["predictions"] = dict(zip(result.case_ids, result.predictions.tolist()))
    payload["excluded"] = result.errors
    _write_report(prefix, table, payload)
    print(table, end="")
    print(f"report: {prefix}.txt, {prefix}.json")
    return EXIT_OK


def cmd_explain(args) -> int:
    cfg = RunConfig.load(args.config, _overrides(args))
    _announce_seed(cfg.seed)
    entries = {e.case_id: e for e in parse_manifest(cfg.manifest)}
    if args.case not in entries:
        ids = sorted(entries)
        shown = ", ".join(ids[:10]) + (f", ... ({len(ids)} total)" if len(ids) > 10 else "")
        raise ConfigError(f"unknown case {args.case!r}; available: {shown}")
    try:
        params, model_cfg = load_checkpoint(args.checkpoint)
    except FormatError as exc:
        raise CLIError(f"cannot load checkpoint: {exc}", EXIT_EVAL) from exc
    record = load_records([entries[args.case]])[0]
    try:
        sample = central_sample(record, model_cfg.k, model_cfg.modalities)
        logits, stack = forward_classify(sample.image, params, model_cfg, record=True)
    except (ConfigError, InsufficientDepthError) as exc:
        raise CLIError(f"forward pass failed: {exc}", EXIT_EVAL) from exc
    cmap = explain_stack(stack, model_cfg.grid_h, model_cfg.grid_w, model_cfg.patch_size)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    pgm, csv = export_heatmap(cmap, prefix)
    pred = int(np.argmax(logits))
    info = {"case_id": args.case, "label": record.label, "predicted": pred,
            "predicted_name": CLASS_NAMES[pred], "logits": [float(x) for x in logits],
            "window_start": sample.window_start, "num_patches": int(cmap.raw.size)}
    json_path = Path(str(prefix) + ".json")
    json_path.write_text(json.dumps(info, indent=2) + "\n", encoding="utf-8")
    print(f"case {args.case}: predicted {pred} ({CLASS_NAMES[pred]}), label {record.label}")
    print(f"wrote {pgm}, {csv}, {json_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="run config JSON (default: none)")
    p.add_argument("--seed", type=int, default=d(None),
                   help="top-level seed, overrides the config (default: config value or 0)")
    p.add_argument("--threads", type=int, default=d(None),
                   help="BLAS thread limit (default: library default)")
    p.add_argument("--quiet", action="store_true", default=d(False),
                   help="only print results (default: False)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridvit",
                                     description="Grid vision transformer for paired T1/T2 volumes.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic three-class dataset")
    _global_flags(p, suppress=True)
    p.add_argument("--spec", default=None, help="synthetic spec JSON (default: built-in spec)")
    p.add_argument("--out", required=True, help="output directory (required, no default)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a manifest, write a checkpoint")
    _global_flags(p, suppress=True)
    p.add_argument("--out", default=None, help="checkpoint path (default: <output_dir>/model.gvck)")
    p.add_argument("--manifest", default=None,
                   help="manifest path, overrides the config (default: config value)")
    p.add_argument("--mode", choices=FUSION_MODES, default=None,
                   help="input mode, overrides the config (default: config value or early)")
    p.add_argument("--epochs", type=int, default=None,
                   help="overrides train.epochs (default: config value or 100)")
    p.add_argument("--lr", type=float, default=None,
                   help="overrides train.lr (default: config value or 0.003)")
    p.add_argument("--batch-size", type=int, default=None,
                   help="overrides train.batch_size (default: config value or 8)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or run nested CV")
    _global_flags(p, suppress=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--checkpoint", default=None,
                   help="checkpoint to evaluate on every manifest case (default: none)")
    g.add_argument("--cv", action="store_true", default=False,
                   help="run stratified nested CV instead (default: False)")
    p.add_argument("--modes", default=None,
                   help="comma list of t1,t2,late,early for --cv (default: config mode)")
    p.add_argument("--folds", type=int, default=None,
                   help="overrides the config's fold count (default: config value or 10)")
    p.add_argument("--epochs", type=int, default=None,
                   help="overrides train.epochs (default: config value or 100)")
    p.add_argument("--manifest", default=None,
                   help="manifest path, overrides the config (default: config value)")
    p.add_argument("--out", default=None,
                   help="report prefix (default: <output_dir>/cv_report or eval_report)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="attention-rollout heatmap for one case")
    _global_flags(p, suppress=True)
    p.add_argument("--checkpoint", required=True, help="checkpoint path (required, no default)")
    p.add_argument("--case", required=True, help="case id from the manifest (required, no default)")
    p.add_argument("--out", required=True, help="output prefix for .pgm/.csv/.json (required, no default)")
    p.add_argument("--manifest", default=None,
                   help="manifest path, overrides the config (default: config value)")
    p.set_defaults(func=cmd_explain)
    return parser


@contextlib.contextmanager
def _thread_limit(n: Optional[int]):
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except TrainingAbort as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except EvaluationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except (ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
