"""Rule-based detectors and the CTR pre-filter pipeline.

Scores per source:

- ``fd``: central transaction ratio of the subgraph
- ``density``: fraction of slices holding at least one transaction
- ``repeat``: fraction of test-slice transactions whose directed pair also
  occurs in a training slice (NaN when the TEG cannot be split)
- ``model`` / ``pipeline``: phishing probability from the classifier, or the
  CTR for addresses the pre-filter settled
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .estimator import check_tegs
from .teg import Teg, ctr

logger = logging.getLogger(__name__)

SOURCES = ("fd", "density", "repeat", "model", "pipeline")


@dataclass(frozen=True)
class FdConfig:
    ctr_threshold: float = 0.6

    def __post_init__(self):
        if not 0.0 <= self.ctr_threshold <= 1.0:
            raise ValueError(f"ctr_threshold must lie in [0, 1], got {self.ctr_threshold}")


@dataclass(frozen=True)
class Verdict:
    addr: str
    predicted_phishing: bool
    score: float
    source: str
    label: Optional[bool] = None


def fd_detect(teg: Teg, config: FdConfig = FdConfig()) -> Verdict:
    score = ctr(teg)
    return Verdict(teg.center, score > config.ctr_threshold, score, "fd", teg.label)


def density_detect(teg: Teg) -> Verdict:
    score = float(np.count_nonzero(teg.slice_counts())) / teg.t_slices
    return Verdict(teg.center, score > 0.5, score, "density", teg.label)


def training_slice_count(t_slices: int, split_ratio: float) -> int:
    # rounding first keeps 0.7 * 10 from becoming 8
    return int(math.ceil(round(split_ratio * t_slices, 9)))


def repeat_detect(teg: Teg, split_ratio: float = 0.7) -> Verdict:
    """Directed-pair repetition between the leading and trailing slices."""
    if teg.t_slices < 2:
        raise ValueError("repeat detection needs at least 2 slices")
    if not 0.0 < split_ratio < 1.0:
        raise ValueError(f"split_ratio must lie in (0, 1), got {split_ratio}")
    cut = training_slice_count(teg.t_slices, split_ratio)
    train = teg.slice < cut
    test = ~train
    if not train.any():
        raise ValueError(f"{teg.center}: no transactions in the first {cut} slices")
    if not test.any():
        raise ValueError(f"{teg.center}: no transactions after slice {cut - 1}")
    seen = set(zip(teg.src[train].tolist(), teg.dst[train].tolist()))
    repeated = sum((u, v) in seen for u, v in zip(teg.src[test].tolist(), teg.dst[test].tolist()))
    score = repeated / int(test.sum())
    return Verdict(teg.center, score > 0.1, score, "repeat", teg.label)


def repeat_detect_many(tegs: Iterable[Teg], split_ratio: float = 0.7) -> List[Verdict]:
    """Batch form: TEGs that cannot be split are verdicted normal with a NaN score."""
    out = []
    for teg in tegs:
        try:
            out.append(repeat_detect(teg, split_ratio))
        except ValueError as exc:
            logger.info("repeat detector: %s", exc)
            out.append(Verdict(teg.center, False, float("nan"), "repeat", teg.label))
    return out


@dataclass
class PipelineResult:
    verdicts: List[Verdict]
    model_invocations: int
    fd_seconds: float = 0.0
    model_seconds: float = 0.0
    filtered: List[str] = field(default_factory=list)


def model_detect(tegs: Sequence[Teg], model) -> List[Verdict]:
    proba = model.predict_proba(list(tegs))[:, 1] if tegs else np.empty(0)
    return [Verdict(t.center, bool(p > 0.5), float(p), "model", t.label) for t, p in zip(tegs, proba)]


def pipeline_detect(tegs: Sequence[Teg], model, fd_config: FdConfig = FdConfig()) -> PipelineResult:
    """CTR pre-filter, then the classifier on the addresses that pass.

    Addresses with CTR at or below the threshold are verdicted normal and
    never reach ``model``. Verdicts keep the input order.
    """
    tegs = list(tegs)
    t0 = time.perf_counter()
    fd = [fd_detect(t, fd_config) for t in tegs]
    fd_seconds = time.perf_counter() - t0
    passed = [i for i, v in enumerate(fd) if v.predicted_phishing]
    t0 = time.perf_counter()
    scored = model_detect([tegs[i] for i in passed], model)
    model_seconds = time.perf_counter() - t0
    verdicts = [Verdict(v.addr, False, v.score, "pipeline", v.label) for v in fd]
    for i, v in zip(passed, scored):
        verdicts[i] = Verdict(v.addr, v.predicted_phishing, v.score, "pipeline", v.label)
    filtered = [v.addr for v in fd if not v.predicted_phishing]
    return PipelineResult(verdicts, len(passed), fd_seconds, model_seconds, filtered)


def write_verdicts(path, verdicts: Iterable[Verdict]):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["address", "source", "score", "predicted", "label"])
        for v in verdicts:
            label = "" if v.label is None else int(bool(v.label))
            w.writerow([v.addr, v.source, repr(float(v.score)), int(v.predicted_phishing), label])


def read_verdicts(path) -> List[Verdict]:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            label = None if row["label"] == "" else row["label"] == "1"
            out.append(Verdict(row["address"], row["predicted"] == "1", float(row["score"]),
                               row["source"], label))
    return out


class _RuleDetector(ClassifierMixin, BaseEstimator):
    """Shared estimator plumbing; rule detectors have nothing to learn."""

    def fit(self, X, y=None):
        check_tegs(X)
        self.classes_ = np.array([0, 1])
        return self

    def _verdicts(self, tegs) -> List[Verdict]:
        raise NotImplementedError

    def decision_function(self, X) -> np.ndarray:
        return np.array([v.score for v in self._verdicts(check_tegs(X))])

    def predict(self, X) -> np.ndarray:
        return np.array([int(v.predicted_phishing) for v in self._verdicts(check_tegs(X))])

    def score(self, X, y=None, sample_weight=None):
        from .estimator import check_labels

        tegs = check_tegs(X)
        return super().score(tegs, check_labels(y, tegs), sample_weight)


class FastDetector(_RuleDetector):
    """CTR threshold detector (phishing iff CTR > ``ctr_threshold``)."""

    def __init__(self, ctr_threshold: float = 0.6):
        self.ctr_threshold = ctr_threshold

    def _verdicts(self, tegs):
        cfg = FdConfig(self.ctr_threshold)
        return [fd_detect(t, cfg) for t in tegs]


class DensityDetector(_RuleDetector):
    def _verdicts(self, tegs):
        return [density_detect(t) for t in tegs]


class RepeatDetector(_RuleDetector):
    def __init__(self, split_ratio: float = 0.7):
        self.split_ratio = split_ratio

    def _verdicts(self, tegs):
        return repeat_detect_many(tegs, self.split_ratio)
