"""Optimization loop, stratified splits and detection metrics."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tape
from .model import ModelConfig, ModelParams, cross_entropy, forward, init_params
from .teg import Teg

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite training loss {value} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 16
    train_ratio: float = 0.7
    seed: int = 0
    repeats: int = 5
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 < self.train_ratio < 1:
            raise ValueError(f"train_ratio must lie in (0, 1), got {self.train_ratio}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ModelParams, grads: Dict[str, np.ndarray]):
        for k in params:
            params[k] -= self.lr * grads[k]


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: Dict[str, np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k in params:
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")


def value_and_grad(batch: Sequence[Tuple[Teg, int]], params: ModelParams, config: ModelConfig):
    """Mean cross-entropy over ``batch`` and its gradient.

    Samples are differentiated one tape at a time and summed in batch order,
    so the result does not depend on scheduling.
    """
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    total = 0.0
    for teg, label in batch:
        P = params.tensors(requires_grad=True)
        with Tape() as tape:
            probs, _ = forward(teg, P, config)
            ce = cross_entropy(probs, int(label))
        tape.backward(ce)
        total += float(ce.data)
        for k, t in P.items():
            if t.grad is not None:
                grads[k] += t.grad
    n = len(batch)
    for k in grads:
        grads[k] /= n
    return total / n, grads


def fit_params(
    tegs: Sequence[Teg],
    labels: Sequence[int],
    model_config: ModelConfig,
    train_config: TrainConfig,
    params: Optional[ModelParams] = None,
    callback: Optional[Callable[[int, float], None]] = None,
) -> Tuple[ModelParams, List[float]]:
    """Train from ``params`` (or a seeded init) and return the loss curve.

    The curve holds the sample-weighted mean training loss of each epoch.
    """
    if len(tegs) == 0:
        raise ValueError("cannot fit on an empty training set")
    if len(tegs) != len(labels):
        raise ValueError(f"{len(tegs)} TEGs but {len(labels)} labels")
    params = init_params(model_config, train_config.seed) if params is None else params.copy()
    opt = make_optimizer(train_config.optimizer, train_config.learning_rate)
    rng = np.random.default_rng(train_config.seed)
    data = list(zip(tegs, [int(y) for y in labels]))
    curve: List[float] = []
    bs = train_config.batch_size
    for epoch in range(train_config.epochs):
        order = rng.permutation(len(data))
        epoch_loss = 0.0
        for start in range(0, len(order), bs):
            batch = [data[i] for i in order[start:start + bs]]
            value, grads = value_and_grad(batch, params, model_config)
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, value)
            epoch_loss += value * len(batch)
            opt.step(params, grads)
        epoch_loss /= len(data)
        curve.append(epoch_loss)
        if callback is not None:
            callback(epoch, epoch_loss)
        logger.debug("epoch %d loss %.6f", epoch, epoch_loss)
    return params, curve


def split(labels: Sequence[int], train_ratio: float, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Stratified, seeded train/test index split.

    Each class contributes ``round(train_ratio * class_size)`` training items.
    """
    y = np.asarray(labels, dtype=int)
    if y.size == 0:
        raise ValueError("cannot split an empty dataset")
    if not 0 < train_ratio < 1:
        raise ValueError(f"train_ratio must lie in (0, 1), got {train_ratio}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        if idx.size == 0:
            raise ValueError(f"class {cls} has no members; a stratified split is impossible")
        idx = rng.permutation(idx)
        k = int(round(train_ratio * idx.size))
        train.append(idx[:k])
        test.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f_score: float
    accuracy: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int) -> "Metrics":
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        total = tp + fp + fn + tn
        acc = (tp + tn) / total if total else 0.0
        return cls(p, r, f, acc, tp, fp, fn, tn)

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "Metrics":
        """Phishing (1) is the positive class."""
        y_true = np.asarray(y_true, dtype=bool)
        y_pred = np.asarray(y_pred, dtype=bool)
        if y_true.shape != y_pred.shape:
            raise ValueError(f"shape mismatch {y_true.shape} vs {y_pred.shape}")
        tp = int(np.sum(y_true & y_pred))
        fp = int(np.sum(~y_true & y_pred))
        fn = int(np.sum(y_true & ~y_pred))
        tn = int(np.sum(~y_true & ~y_pred))
        return cls.from_counts(tp, fp, fn, tn)

    def as_dict(self):
        return asdict(self)


def evaluate(model, tegs: Sequence[Teg], labels=None) -> Metrics:
    """Metrics of ``model.predict`` on ``tegs`` (labels default to ``teg.label``)."""
    if len(tegs) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    if labels is None:
        labels = [int(t.label) for t in tegs]
    return Metrics.from_predictions(labels, model.predict(tegs))


@dataclass
class RepeatReport:
    train_ratio: float
    runs: List[Metrics] = field(default_factory=list)

    def summary(self) -> dict:
        out = {"train_ratio": self.train_ratio, "runs": len(self.runs)}
        for name in ("precision", "recall", "f_score", "accuracy"):
            vals = np.array([getattr(m, name) for m in self.runs])
            out[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return out

    def write(self, csv_path, json_path=None):
        with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", "train_ratio", "precision", "recall", "f_score", "accuracy"])
            for i, m in enumerate(self.runs):
                w.writerow([i, self.train_ratio, repr(m.precision), repr(m.recall),
                            repr(m.f_score), repr(m.accuracy)])
        if json_path is not None:
            Path(json_path).write_text(json.dumps(self.summary(), indent=2) + "\n", encoding="utf-8")


def run_repeats(
    tegs: Sequence[Teg],
    labels: Sequence[int],
    make_model: Callable[[int], object],
    train_ratio: float = 0.7,
    repeats: int = 5,
    seed: int = 0,
) -> RepeatReport:
    """Split, fit and evaluate ``repeats`` times with seeds ``seed + run``."""
    report = RepeatReport(train_ratio)
    for run in range(repeats):
        tr, te = split(labels, train_ratio, seed + run)
        model = make_model(seed + run)
        model.fit([tegs[i] for i in tr], [labels[i] for i in tr])
        report.runs.append(evaluate(model, [tegs[i] for i in te], [labels[i] for i in te]))
    return report
