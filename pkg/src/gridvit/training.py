"""Mini-batch fine-tuning with Adam, best-epoch selection, and central-window evaluation."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .data import GridSample, ScanRecord, augment, central_sample, window_samples
from .errors import InsufficientDepthError, TrainingAbort, ValidationError
from .metrics import MetricSet, compute_metrics
from .model import ModelConfig, check_params, forward_logits, init_params

log = logging.getLogger(__name__)

LONG_EPOCHS = 3000
SELECTION_METRICS = ("accuracy", "loss")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.003
    batch_size: int = 8
    epochs: int = 100
    seed: int = 0
    augment: bool = True
    val_fraction: float = 0.2
    selection_metric: str = "accuracy"
    stride: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if not 0.0 <= self.val_fraction <= 0.5:
            raise ValidationError("val_fraction must lie in [0, 0.5]")
        if self.lr < 0:
            raise ValidationError("lr must be non-negative")
        if self.selection_metric not in SELECTION_METRICS:
            raise ValidationError(f"unsupported selection metric {self.selection_metric!r}")
        if self.stride < 1:
            raise ValidationError("stride must be >= 1")

    @classmethod
    def long_schedule(cls, **overrides) -> "TrainConfig":
        return cls(**{"epochs": LONG_EPOCHS, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: Mapping) -> "TrainConfig":
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown train config field(s): {sorted(unknown)}")
        return cls(**obj)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: Optional[float]
    val_loss: Optional[float]
    steps: int
    seconds: float


@dataclass
class TrainLog:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    def to_jsonl(self, include_timing: bool = False) -> str:
        lines = []
        for rec in self.epochs:
            d = asdict(rec)
            if not include_timing:
                d.pop("seconds")
            d["best"] = rec.epoch == self.best_epoch
            lines.append(json.dumps(d))
        return "".join(line + "\n" for line in lines)

    def write(self, path, include_timing: bool = False) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_jsonl(include_timing))

    @property
    def best(self) -> Optional[EpochRecord]:
        return self.epochs[self.best_epoch] if self.best_epoch >= 0 else None


# ---------------------------------------------------------------------------


def loss_and_grads(params: Mapping[str, np.ndarray], images: np.ndarray, labels: np.ndarray,
                   cfg: ModelConfig) -> Tuple[float, Dict[str, np.ndarray]]:
    leaves = {k: nx.Var(v, name=k) for k, v in params.items()}
    with nx.Tape() as tape:
        logits = forward_logits(images, leaves, cfg)
        loss = nx.cross_entropy(logits, labels)
    value = float(nx.value_of(loss))
    if not math.isfinite(value):
        return value, {}
    tape.backward(loss)
    return value, {k: leaves[k].grad for k in params}


def train_step(params: Mapping[str, np.ndarray], batch: Sequence[GridSample], state: nx.AdamState,
               cfg: ModelConfig, epoch: Optional[int] = None, batch_index: Optional[int] = None):
    """Forward, backward and one Adam update. Returns ``(loss, new_params, state)``.

    The loss is measured before the update.
    """
    if not batch:
        raise ValidationError("empty batch")
    images = np.stack([s.image for s in batch])
    labels = np.array([s.label for s in batch], dtype=np.int64)
    loss, grads = loss_and_grads(params, images, labels, cfg)
    if not math.isfinite(loss):
        cases = sorted({s.case_id for s in batch})
        raise TrainingAbort(
            f"non-finite loss {loss} at epoch {epoch}, batch {batch_index}; "
            f"cases {cases[:8]}, input range [{images.min():.4g}, {images.max():.4g}]"
        )
    new_params, state = nx.adam_step(params, grads, state)
    return loss, new_params, state


def _logits(params, cfg: ModelConfig, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = [nx.value_of(forward_logits(images[i:i + batch_size], params, cfg))
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, cfg.num_classes), dtype=nx.default_dtype())


def _predict_images(params, cfg: ModelConfig, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    return np.argmax(_logits(params, cfg, images, batch_size), axis=1)


def fit(train: Sequence[ScanRecord], val: Sequence[ScanRecord], model_cfg: ModelConfig,
        train_cfg: TrainConfig, params: Optional[Mapping[str, np.ndarray]] = None,
        on_epoch: Optional[Callable[[EpochRecord], None]] = None):
    """Train on all sliding windows of ``train``; keep the epoch that scores best on ``val``.

    The score is validation accuracy, or negative validation cross-entropy when
    ``selection_metric == "loss"``; ties go to the earliest epoch. Without
    validation cases the last epoch is returned. Returns ``(params, TrainLog)``.
    """
    if not train:
        raise ValidationError("training set is empty")
    overlap = {r.case_id for r in train} & {r.case_id for r in val}
    if overlap:
        raise ValidationError(f"train and validation share cases: {sorted(overlap)[:5]}")

    samples: List[GridSample] = []
    for rec in train:
        samples.extend(window_samples(rec, model_cfg.k, train_cfg.stride, model_cfg.modalities))
    val_images = np.stack([central_sample(r, model_cfg.k, model_cfg.modalities).image for r in val]) \
        if val else None
    val_labels = np.array([r.label for r in val], dtype=np.int64)

    if params is None:
        params = init_params(model_cfg, seed=np.random.default_rng([train_cfg.seed, 0]))
    else:
        check_params(params, model_cfg)
        params = dict(params)
    state = nx.AdamState(lr=train_cfg.lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.eps)

    trainlog = TrainLog()
    best_params, best_score = params, -math.inf
    n = len(samples)
    bs = train_cfg.batch_size
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([train_cfg.seed, 1, epoch])
        order = rng.permutation(n)
        loss_sum, steps = 0.0, 0
        for b, i in enumerate(range(0, n, bs)):
            batch = [samples[j] for j in order[i:i + bs]]
            if train_cfg.augment:
                batch = [augment(s, rng) for s in batch]
            loss, params, state = train_step(params, batch, state, model_cfg, epoch, b)
            loss_sum += loss * len(batch)
            steps += 1
        val_acc = val_loss = None
        if val_images is not None:
            logits = _logits(params, model_cfg, val_images)
            val_acc = float(np.mean(np.argmax(logits, axis=1) == val_labels))
            val_loss = float(nx.cross_entropy(logits, val_labels))
        rec = EpochRecord(epoch, loss_sum / n, val_acc, val_loss, steps, time.perf_counter() - t0)
        trainlog.epochs.append(rec)
        if val_acc is None:
            score = float(epoch)
        else:
            score = val_acc if train_cfg.selection_metric == "accuracy" else -val_loss
        if score > best_score:
            best_score, best_params, trainlog.best_epoch = score, params, epoch
        log.debug("epoch %d loss %.5f val_acc %s", epoch, rec.train_loss, val_acc)
        if on_epoch is not None:
            on_epoch(rec)
    return dict(best_params), trainlog


@dataclass
class EvalResult:
    case_ids: List[str]
    predictions: np.ndarray
    labels: np.ndarray
    metrics: Optional[MetricSet]
    errors: Dict[str, str] = field(default_factory=dict)

    @property
    def warnings(self) -> int:
        return len(self.errors)


def evaluate(params: Mapping[str, np.ndarray], cfg: ModelConfig,
             records: Sequence[ScanRecord]) -> EvalResult:
    """Predict each case from its central window only (no augmentation)."""
    ids, images, labels, errors = [], [], [], {}
    for rec in records:
        try:
            images.append(central_sample(rec, cfg.k, cfg.modalities).image)
        except InsufficientDepthError as exc:
            errors[rec.case_id] = str(exc)
            continue
        ids.append(rec.case_id)
        labels.append(rec.label)
    if errors:
        log.warning("%d case(s) excluded from evaluation: %s", len(errors), sorted(errors)[:5])
    labels = np.array(labels, dtype=np.int64)
    if not ids:
        return EvalResult([], np.zeros(0, dtype=np.int64), labels, None, errors)
    preds = _predict_images(params, cfg, np.stack(images))
    return EvalResult(ids, preds, labels, compute_metrics(preds, labels, cfg.num_classes), errors)
