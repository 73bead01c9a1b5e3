"""Structural evasion attacks on TEGs and the degradation harness."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tape, Tensor
from .model import cross_entropy, forward
from .teg import Teg
from .train import Metrics

DEFAULT_CTR_LEVELS = (0.8, 0.6, 0.4, 0.2)
DEFAULT_GRAD_LEVELS = (0.1, 0.2, 0.3, 0.4, 0.5)


class UnreachableTargetError(ValueError):
    def __init__(self, address: str, target: float, achievable: float):
        super().__init__(
            f"{address}: CTR target {target} unreachable, lowest achievable CTR is {achievable:.6g}"
        )
        self.achievable = achievable


@dataclass(frozen=True)
class AddedEdge:
    address: str
    slice: int
    src: int
    dst: int
    amount: float
    timestamp: int

    def as_dict(self):
        return {"address": self.address, "slice": self.slice, "from": self.src,
                "to": self.dst, "amount": self.amount, "timestamp": self.timestamp}


@dataclass(frozen=True)
class CtrAttackConfig:
    target_ctr: float = 0.2
    slices_fraction: float = 0.5
    seed: int = 0
    # None allows any number of repeats on a pair
    max_per_pair: Optional[int] = None

    def __post_init__(self):
        if not 0.0 < self.target_ctr < 1.0:
            raise ValueError(f"target_ctr must lie in (0, 1), got {self.target_ctr}")
        if not 0.0 < self.slices_fraction <= 1.0:
            raise ValueError(f"slices_fraction must lie in (0, 1], got {self.slices_fraction}")
        if self.max_per_pair is not None and self.max_per_pair < 1:
            raise ValueError("max_per_pair must be >= 1")


@dataclass(frozen=True)
class GradAttackConfig:
    modify_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.modify_rate <= 0.5:
            raise ValueError(f"modify_rate must lie in [0, 0.5], got {self.modify_rate}")


def _address_rng(seed: int, address: str) -> np.random.Generator:
    key = [int(b) for b in address.encode("utf-8")]
    return np.random.default_rng(np.random.SeedSequence([seed, len(key), *key]))


def _slice_time(teg: Teg, t: int, rng) -> int:
    lo = teg.boundaries[t]
    hi = teg.boundaries[t + 1]
    start = int(math.ceil(lo))
    stop = int(math.floor(hi)) if t == teg.t_slices - 1 else int(math.ceil(hi)) - 1
    if stop < start:
        return start
    return int(rng.integers(start, stop + 1))


def ctr_attack(teg: Teg, config: CtrAttackConfig) -> Tuple[Teg, List[AddedEdge]]:
    """Add random non-central transactions until the CTR drops below the target.

    Edges go into ``ceil(T * slices_fraction)`` randomly chosen slices, one
    at a time, each between a uniformly drawn ordered pair of non-central
    nodes, with an amount uniform below the largest original amount.
    A target at or above the current CTR is a no-op.
    """
    total = teg.n_transactions
    central = int(np.count_nonzero((teg.src == 0) | (teg.dst == 0)))
    if total == 0:
        raise ValueError(f"{teg.center}: no transactions to attack")
    if config.target_ctr >= central / total:
        return teg, []
    n_non = teg.n - 1
    if n_non < 2:
        raise UnreachableTargetError(teg.center, config.target_ctr, central / total)
    rng = _address_rng(config.seed, teg.center)
    n_sel = min(teg.t_slices, int(math.ceil(round(teg.t_slices * config.slices_fraction, 9))))
    slices = np.sort(rng.choice(teg.t_slices, size=n_sel, replace=False))
    max_amount = float(teg.amount.max()) if teg.amount.size else 1.0

    needed = 0
    while central / (total + needed) >= config.target_ctr:
        needed += 1
    if config.max_per_pair is not None:
        capacity = n_sel * n_non * (n_non - 1) * config.max_per_pair
        if needed > capacity:
            raise UnreachableTargetError(teg.center, config.target_ctr,
                                         central / (total + capacity))

    used: Dict[Tuple[int, int, int], int] = {}
    added: List[AddedEdge] = []
    while central / (total + len(added)) >= config.target_ctr:
        t = int(slices[rng.integers(0, n_sel)])
        i, j = (int(v) + 1 for v in rng.choice(n_non, size=2, replace=False))
        if config.max_per_pair is not None:
            if used.get((t, i, j), 0) >= config.max_per_pair:
                continue
            used[(t, i, j)] = used.get((t, i, j), 0) + 1
        amount = float(rng.uniform(0.0, max_amount))
        added.append(AddedEdge(teg.center, t, i, j, amount, _slice_time(teg, t, rng)))
    return _apply(teg, added), added


def _apply(teg: Teg, added: Sequence[AddedEdge]) -> Teg:
    if not added:
        return teg
    return teg.with_edges(
        [e.src for e in added], [e.dst for e in added], [e.amount for e in added],
        [e.timestamp for e in added], [e.slice for e in added],
    )


def adjacency_gradient(teg: Teg, model, label: Optional[int] = None) -> np.ndarray:
    """``dL/dA`` for the symmetric per-slice adjacency, shape (T, N, N)."""
    if label is None:
        if teg.label is None:
            raise ValueError(f"{teg.center}: the gradient attack needs a labeled TEG")
        label = int(teg.label)
    P = model.params_.tensors()
    adjs = [Tensor(a.copy(), requires_grad=True) for a in teg.sym_adj]
    with Tape() as tape:
        probs, _ = forward(teg, P, model.model_config_, adjacency=adjs)
        loss = cross_entropy(probs, int(label))
    tape.backward(loss)
    return np.stack([np.zeros_like(a.data) if a.grad is None else a.grad for a in adjs])


def grad_attack(teg: Teg, model, config: GradAttackConfig, n_max: int) -> Tuple[Teg, List[AddedEdge]]:
    """Insert the ``round(modify_rate * n_max)`` highest-gradient missing edges.

    Candidates are every (slice, i<j) with no transaction in either
    direction; the score of a pair is ``g[i, j] + g[j, i]`` since the model
    sees the symmetrized adjacency. Ranking is computed once on the clean TEG
    and ties break by (slice, i, j). Inserted edges are unit transactions
    ``i -> j`` timestamped at the start of their slice.
    """
    k = int(round(config.modify_rate * n_max))
    if k == 0:
        return teg, []
    g = adjacency_gradient(teg, model)
    sym = teg.sym_adj
    iu, ju = np.triu_indices(teg.n, k=1)
    cands = []
    for t in range(teg.t_slices):
        free = sym[t][iu, ju] == 0
        score = (g[t] + g[t].T)[iu, ju][free]
        for s, i, j in zip(score, iu[free], ju[free]):
            cands.append((-float(s), t, int(i), int(j)))
    if len(cands) < k:
        warnings.warn(
            f"{teg.center}: only {len(cands)} free positions for {k} insertions", RuntimeWarning
        )
    cands.sort()
    added = [
        AddedEdge(teg.center, t, i, j, 1.0, int(math.ceil(teg.boundaries[t])))
        for _, t, i, j in cands[:k]
    ]
    return _apply(teg, added), added


def attack_many(tegs: Sequence[Teg], attack: str, level: float, seed: int = 0,
                model=None, n_max: Optional[int] = None) -> Tuple[List[Teg], List[AddedEdge]]:
    """Attack phishing-labeled TEGs only; the rest pass through unchanged."""
    out, log = [], []
    for teg in tegs:
        if not teg.label:
            out.append(teg)
            continue
        if attack == "ctr":
            new, added = ctr_attack(teg, CtrAttackConfig(target_ctr=level, seed=seed))
        elif attack == "grad":
            if model is None or n_max is None:
                raise ValueError("the gradient attack needs a model and n_max")
            new, added = grad_attack(teg, model, GradAttackConfig(level, seed), n_max)
        else:
            raise ValueError(f"unknown attack {attack!r}; choose 'ctr' or 'grad'")
        out.append(new)
        log.extend(added)
    return out, log


@dataclass(frozen=True)
class DegradationRow:
    model: str
    attack: str
    level: str
    metrics: Metrics


def degradation_curve(
    tegs: Sequence[Teg],
    models: Mapping[str, object],
    attack: str,
    levels: Iterable[float],
    seed: int = 0,
    n_max: Optional[int] = None,
    log: Optional[List[AddedEdge]] = None,
) -> List[DegradationRow]:
    """Metrics per (model, level) on attacked test TEGs, with a clean baseline.

    ``tegs`` is the test split; only its phishing TEGs are perturbed. The
    gradient attack uses each model's own gradients (models without
    parameters are skipped for it). The baseline row has level ``clean``.
    """
    tegs = list(tegs)
    labels = [int(t.label) for t in tegs]
    levels = list(levels)
    rows = []
    cache = {}
    for name, model in models.items():
        rows.append(DegradationRow(name, attack, "clean",
                                   Metrics.from_predictions(labels, model.predict(tegs))))
        if attack == "grad" and not hasattr(model, "params_"):
            continue
        for level in levels:
            if attack == "ctr":
                if level not in cache:
                    cache[level] = attack_many(tegs, "ctr", level, seed)
                attacked, added = cache[level]
            else:
                attacked, added = attack_many(tegs, "grad", level, seed, model=model, n_max=n_max)
            if log is not None:
                log.extend(added)
            rows.append(DegradationRow(name, attack, repr(float(level)),
                                       Metrics.from_predictions(labels, model.predict(attacked))))
    return rows


def write_degradation(path, rows: Iterable[DegradationRow]):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "attack", "level", "precision", "recall", "f_score", "accuracy"])
        for r in rows:
            m = r.metrics
            w.writerow([r.model, r.attack, r.level, repr(m.precision), repr(m.recall),
                        repr(m.f_score), repr(m.accuracy)])


def write_added_edges(path, edges: Iterable[AddedEdge]):
    with Path(path).open("w", encoding="utf-8") as fh:
        for e in edges:
            fh.write(json.dumps(e.as_dict(), sort_keys=True) + "\n")
