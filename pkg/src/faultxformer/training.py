"""Training loops, stratified cross-validation and classification metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .model import FaultXformer, FeatureExtractor, Module, build_stages
from .numerics import ops
from .numerics.optim import Adam
from .numerics.tensor import no_grad
from .pipeline import FoldPlan, stratified_folds

log = logging.getLogger(__name__)

DEFAULT_EPOCHS = {"type": 200, "location": 250}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    task: str = "type"
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int | None = None
    seed: int = 0
    patience: int | None = None

    def __post_init__(self):
        if self.task not in DEFAULT_EPOCHS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.task]
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError(f"invalid hyperparameters in {self}")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1")


# --- metrics ------------------------------------------------------------------

@dataclass
class Metrics:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes: int) -> "Metrics":
        y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
        cm = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(cm, (y_true, y_pred), 1)
        return cls.from_confusion(cm)

    @classmethod
    def from_confusion(cls, cm: np.ndarray) -> "Metrics":
        tp = np.diag(cm).astype(np.float64)
        pred = cm.sum(axis=0)
        true = cm.sum(axis=1)
        # 0/0 -> 0 for classes never predicted or absent
        precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
        recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
        s = precision + recall
        f1 = np.divide(2 * precision * recall, s, out=np.zeros_like(tp), where=s > 0)
        total = cm.sum()
        return cls(float(tp.sum() / total) if total else 0.0, float(precision.mean()),
                   float(recall.mean()), float(f1.mean()), cm, precision, recall, f1)

    @property
    def per_class_accuracy(self) -> np.ndarray:
        """Fraction of each true class predicted correctly (the class-wise table convention)."""
        return self.recall

    def row(self) -> tuple[float, float, float, float]:
        return self.accuracy, self.macro_precision, self.macro_recall, self.macro_f1


def predict_logits(forward: Callable, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(x), batch_size):
            out.append(forward(x[s:s + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, 0))


def evaluate(model: Module, x: np.ndarray, y: np.ndarray, n_classes: int | None = None) -> Metrics:
    """Argmax predictions of ``model.logits`` on ``x`` scored against ``y``."""
    model.eval()
    logits = predict_logits(model.logits, x)
    n = n_classes or model.n_classes
    return Metrics.from_predictions(y, logits.argmax(axis=1), n)


# --- training loop -----------------------------------------------------------

@dataclass
class TrainResult:
    loss_curve: list[float] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_f1: float = -1.0


def train(model: Module, x_train: np.ndarray, y_train: np.ndarray, x_val: np.ndarray,
          y_val: np.ndarray, config: TrainConfig) -> TrainResult:
    """Shuffled mini-batch Adam on cross-entropy; restores the best-validation-F1 snapshot."""
    if len(x_train) == 0 or len(x_val) == 0:
        raise TrainingError("empty train or validation split")
    params = model.parameters()
    opt = Adam(params, lr=config.lr)
    result = TrainResult()
    best_state = model.state_dict()
    stale = 0
    for epoch in range(config.epochs):
        model.train()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(x_train))
        drop_rng = np.random.default_rng([config.seed, epoch, 1])
        total = 0.0
        for b, s in enumerate(range(0, len(order), config.batch_size)):
            idx = order[s:s + config.batch_size]
            loss = ops.cross_entropy(model.logits(x_train[idx], drop_rng), y_train[idx])
            val = loss.item()
            if not math.isfinite(val):
                raise TrainingError(f"non-finite loss {val} at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += val * len(idx)
        result.loss_curve.append(total / len(order))
        m = evaluate(model, x_val, y_val)
        result.val_f1.append(m.macro_f1)
        result.val_accuracy.append(m.accuracy)
        log.info("epoch %d loss %.4f val acc %.4f f1 %.4f", epoch, result.loss_curve[-1],
                 m.accuracy, m.macro_f1)
        if m.macro_f1 > result.best_val_f1:
            result.best_val_f1, result.best_epoch = m.macro_f1, epoch
            best_state = model.state_dict()
            stale = 0
            if m.macro_f1 >= 1.0:
                break  # the snapshot can no longer change
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return result


# --- two-stage orchestration ------------------------------------------------

def fit_extractor(features: np.ndarray, labels: np.ndarray, config: TrainConfig,
                  extractor: FeatureExtractor | None = None, n_classes: int | None = None,
                  val_fraction: float = 0.1) -> tuple[FeatureExtractor, TrainResult]:
    """Train stage 1 end to end through its temporary pooled head on ``features``.

    Every row is used (stage-1 training sees the whole dataset); a stratified
    ``val_fraction`` slice of it only drives snapshot selection.
    """
    if extractor is None:
        extractor, _ = build_stages(config.task, n_classes=n_classes, seed=config.seed)
    k = max(2, int(round(1 / val_fraction)))
    val = stratified_folds(labels, k=k, seed=config.seed).test_indices[0]
    res = train(extractor, features, labels, features[val], labels[val], config)
    return extractor, res


def encode(extractor: FeatureExtractor, features: np.ndarray, batch_size: int = 128) -> np.ndarray:
    extractor.eval()
    return predict_logits(extractor, features, batch_size)


@dataclass
class CVReport:
    task: str
    folds: list[Metrics]
    plan: FoldPlan
    train_results: list[TrainResult]

    def table(self) -> np.ndarray:
        return np.array([m.row() for m in self.folds])

    @property
    def mean(self) -> np.ndarray:
        return self.table().mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.table().std(axis=0)

    @property
    def accuracy_cov(self) -> float:
        acc = self.table()[:, 0]
        return float(acc.std() / acc.mean()) if acc.mean() else float("inf")

    @property
    def confusion(self) -> np.ndarray:
        return sum(m.confusion for m in self.folds)

    def write_csv(self, path) -> None:
        write_metrics_csv([f"Fold {i + 1}" for i in range(len(self.folds))],
                          [m.row() for m in self.folds], path,
                          extra=[("Average", tuple(self.mean)), ("Std", tuple(self.std)),
                                 ("CoV", (self.accuracy_cov, float("nan"), float("nan"),
                                          float("nan")))])


def _fmt(v: float) -> str:
    return "" if isinstance(v, float) and math.isnan(v) else format(v, ".6f")


def write_metrics_csv(names, rows, path, extra=(), first_col: str = "Fold") -> None:
    lines = [f"{first_col},Accuracy,Precision,Recall,F1"]
    for name, row in [*zip(names, rows), *extra]:
        lines.append(",".join([str(name), *(_fmt(v) for v in row)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_confusion_csv(cm: np.ndarray, labels, path) -> None:
    lines = ["true\\pred," + ",".join(labels)]
    for lbl, row in zip(labels, cm):
        lines.append(",".join([lbl, *(str(int(v)) for v in row)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_classwise_csv(metrics: Metrics, labels, path) -> None:
    lines = ["Class,Accuracy,Precision,Recall,F1"]
    for i, lbl in enumerate(labels):
        lines.append(",".join([lbl, _fmt(metrics.per_class_accuracy[i]), _fmt(metrics.precision[i]),
                               _fmt(metrics.recall[i]), _fmt(metrics.f1[i])]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cross_validate(encoded: np.ndarray, labels: np.ndarray, config: TrainConfig, k: int = 10,
                   n_classes: int | None = None,
                   model_factory: Callable[[int], FaultXformer] | None = None) -> CVReport:
    """Stratified k-fold CV of a stage-2 classifier on (frozen) stage-1 encodings."""
    labels = np.asarray(labels)
    plan = stratified_folds(labels, k=k, seed=config.seed)
    plan.check(len(labels))
    if model_factory is None:
        def model_factory(fold: int) -> FaultXformer:
            return build_stages(config.task, n_classes=n_classes, seed=config.seed + 7 * fold)[1]
    folds, results = [], []
    for f in range(k):
        tr, va, te = plan.iteration(f)
        # model selection must never see the test fold
        if np.intersect1d(va, te).size or np.intersect1d(tr, te).size:
            raise TrainingError(f"fold {f}: test indices leak into train/validation")
        model = model_factory(f)
        cfg = TrainConfig(config.task, config.lr, config.batch_size, config.epochs,
                          config.seed + f, config.patience)
        res = train(model, encoded[tr], labels[tr], encoded[va], labels[va], cfg)
        m = evaluate(model, encoded[te], labels[te], n_classes or model.n_classes)
        log.info("fold %d: acc %.4f f1 %.4f (best epoch %d)", f + 1, m.accuracy, m.macro_f1,
                 res.best_epoch)
        folds.append(m)
        results.append(res)
    return CVReport(config.task, folds, plan, results)
