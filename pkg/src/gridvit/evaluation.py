"""Stratified nested cross-validation and mean ± std reporting."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import EvaluationError, GridViTError, ValidationError
from .metrics import MetricSet, compute_metrics, confusion_matrix  # noqa: F401 (re-export)
from .model import ModelConfig
from .training import TrainConfig, evaluate, fit

log = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "precision", "recall")
TABLE_ROWS = (("t1", "T1"), ("t2", "T2"), ("late", "Late fusion"), ("early", "Early fusion"))


@dataclass(frozen=True)
class FoldPlan:
    assignment: Dict[str, int]
    folds: int
    seed: int

    def members(self, fold: int) -> List[str]:
        return [cid for cid, f in self.assignment.items() if f == fold]

    def sizes(self) -> List[int]:
        return [len(self.members(f)) for f in range(self.folds)]


def _by_class(records, seed) -> List[List[str]]:
    rng = np.random.default_rng(seed)
    groups = []
    for label in sorted({r.label for r in records}):
        ids = [r.case_id for r in records if r.label == label]
        groups.append([ids[i] for i in rng.permutation(len(ids))])
    return groups


def stratified_folds(records: Sequence, folds: int = 10, seed: int = 0) -> FoldPlan:
    """Deal cases round-robin into folds, class by class, after a seeded shuffle.

    The dealing position carries over between classes, so fold sizes differ by at
    most one overall and per class. ``records`` need ``case_id`` and ``label``.
    """
    if folds < 2:
        raise ValidationError(f"need at least 2 folds, got {folds}")
    ids = [r.case_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate case ids in fold input")
    counts = {}
    for r in records:
        counts[r.label] = counts.get(r.label, 0) + 1
    thin = {c: n for c, n in counts.items() if n < folds}
    if thin:
        log.warning("classes with fewer cases than folds (%d): %s", folds, thin)
    assignment, pos = {}, 0
    for group in _by_class(records, seed):
        for cid in group:
            assignment[cid] = pos % folds
            pos += 1
    ordered = {cid: assignment[cid] for cid in ids}
    return FoldPlan(ordered, folds, seed)


def stratified_holdout(records: Sequence, fraction: float, seed: int = 0):
    """Split into (train, holdout) taking ``round(fraction * n_c)`` cases of each class."""
    if fraction <= 0 or not records:
        return list(records), []
    held = set()
    for group in _by_class(records, seed):
        held.update(group[: int(round(fraction * len(group)))])
    return [r for r in records if r.case_id not in held], [r for r in records if r.case_id in held]


@dataclass
class FoldResult:
    fold: int
    test_ids: List[str]
    metrics: Optional[MetricSet] = None
    best_epoch: Optional[int] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.metrics is not None


def _std(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


@dataclass
class CVReport:
    folds: List[FoldResult]
    fingerprint: str = ""
    name: str = ""

    @property
    def successful(self) -> List[FoldResult]:
        return [f for f in self.folds if f.ok]

    @property
    def failed(self) -> int:
        return len(self.folds) - len(self.successful)

    def values(self, metric: str) -> List[float]:
        return [getattr(f.metrics, metric) for f in self.successful]

    def mean(self, metric: str) -> float:
        vals = self.values(metric)
        if not vals:
            raise EvaluationError(f"report {self.name!r}: no successful folds to aggregate")
        return float(np.mean(vals))

    def std(self, metric: str) -> float:
        if not self.successful:
            raise EvaluationError(f"report {self.name!r}: no successful folds to aggregate")
        return _std(self.values(metric))

    def cell(self, metric: str) -> str:
        return format_cell(self.mean(metric), self.std(metric))

    def to_dict(self) -> dict:
        summary = {}
        if self.successful:
            summary = {m: {"mean": self.mean(m), "std": self.std(m)} for m in METRIC_NAMES}
        return {
            "name": self.name,
            "fingerprint": self.fingerprint,
            "averaging": "macro",
            "std": "sample (ddof=1) over successful folds",
            "failed_folds": self.failed,
            "summary": summary,
            "folds": [
                {"fold": f.fold, "test_ids": f.test_ids, "best_epoch": f.best_epoch,
                 "error": f.error, "metrics": f.metrics.to_dict() if f.ok else None}
                for f in self.folds
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CVReport":
        folds = [FoldResult(f["fold"], f["test_ids"],
                            MetricSet.from_dict(f["metrics"]) if f["metrics"] else None,
                            f["best_epoch"], f["error"]) for f in d["folds"]]
        return cls(folds, d.get("fingerprint", ""), d.get("name", ""))


def format_cell(mean: float, std: float) -> str:
    return "%.2f ± %.2f" % (mean, std)


def config_fingerprint(*configs) -> str:
    blob = json.dumps([c.to_dict() for c in configs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def nested_cv(records: Sequence, model_cfg: ModelConfig, train_cfg: TrainConfig,
              folds: int = 10, seed: Optional[int] = None, name: str = "",
              fit_fn: Callable = fit, on_fold: Optional[Callable[[FoldResult], None]] = None) -> CVReport:
    """Outer stratified folds; inner stratified hold-out picks the best epoch."""
    seed = train_cfg.seed if seed is None else seed
    plan = stratified_folds(records, folds, seed)
    by_id = {r.case_id: r for r in records}
    seen = [cid for f in range(folds) for cid in plan.members(f)]
    assert sorted(seen) == sorted(by_id) and len(seen) == len(set(seen)), "fold plan is not a partition"

    results = []
    for f in range(folds):
        test_ids = plan.members(f)
        result = FoldResult(f, test_ids)
        try:
            rest = [r for r in records if plan.assignment[r.case_id] != f]
            train, val = stratified_holdout(rest, train_cfg.val_fraction, seed=(seed, f))
            params, trainlog = fit_fn(train, val, model_cfg, train_cfg)
            ev = evaluate(params, model_cfg, [by_id[c] for c in test_ids])
            if ev.metrics is None:
                raise EvaluationError(f"fold {f}: no evaluable test cases")
            result.metrics, result.best_epoch = ev.metrics, trainlog.best_epoch
        except (GridViTError, FloatingPointError) as exc:
            log.error("fold %d failed: %s", f, exc)
            result.error = f"{type(exc).__name__}: {exc}"
        results.append(result)
        if on_fold is not None:
            on_fold(result)
    report = CVReport(results, config_fingerprint(model_cfg, train_cfg), name)
    if report.failed:
        log.warning("%s: %d of %d folds failed and are excluded", name or "cv", report.failed, folds)
    return report


def aggregate_report(reports: Mapping[str, CVReport]) -> List[List[str]]:
    """Table rows ``[label, accuracy, precision, recall]``, in T1 / T2 / Late / Early order.

    Keys are fusion modes (``t1``, ``t2``, ``late``, ``early``); any other keys
    follow in insertion order under their own name.
    """
    rows = []
    known = dict(TABLE_ROWS)
    order = [k for k, _ in TABLE_ROWS if k in reports] + [k for k in reports if k not in known]
    for key in order:
        rep = reports[key]
        if not rep.successful:
            raise EvaluationError(f"configuration {key!r} has zero successful folds")
        rows.append([known.get(key, key)] + [rep.cell(m) for m in METRIC_NAMES])
    return rows


def format_table(rows: Sequence[Sequence[str]], folds: Optional[int] = None) -> str:
    header = ["Method", "Accuracy", "Precision", "Recall"]
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(4)]

    def fmt(row):
        return "  ".join(c.ljust(w) if i == 0 else c.center(w) for i, (c, w) in enumerate(zip(row, widths)))

    note = "mean ± sample std over folds; precision/recall macro-averaged (empty denominators count 0)"
    if folds:
        note = f"{folds}-fold nested CV, " + note
    head = fmt(header).rstrip()
    lines = [note, head, "-" * len(head)]
    lines += [fmt(r).rstrip() for r in rows]
    return "\n".join(lines) + "\n"
