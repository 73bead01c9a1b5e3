"""Seeded synthetic labeled transaction datasets.

Each labeled center gets its own disjoint two-hop neighborhood. Phishing
centers collect many one-shot, large incoming transfers in bursts; normal
centers trade repeatedly with fewer counterparties whose own activity
dominates the neighborhood. The central transaction ratio of every center
is drawn from its class range and realized exactly.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import List, Tuple

import numpy as np

from .txdata import AddressLabel, TransactionRecord

PHISHING, NORMAL = 1, 0


class InfeasibleConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_phishing: int = 100
    n_normal: int = 100
    seed: int = 0
    phishing_ctr_range: Tuple[float, float] = (0.9, 1.0)
    normal_ctr_range: Tuple[float, float] = (0.1, 0.4)
    nodes_range: Tuple[int, int] = (8, 50)
    second_order_range: Tuple[int, int] = (0, 30)
    slices_active_range: Tuple[int, int] = (3, 10)
    amount_scale: float = 1.0
    t_slices: int = 10
    slice_seconds: int = 86_400
    start_time: int = 1_500_000_000
    separable: bool = True

    def validate(self):
        if self.n_phishing < 0 or self.n_normal < 0 or self.n_phishing + self.n_normal < 1:
            raise InfeasibleConfigError("need at least one address")
        for name in ("phishing_ctr_range", "normal_ctr_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi <= 1:
                raise InfeasibleConfigError(f"{name} must satisfy 0 < low <= high <= 1, got {(lo, hi)}")
        for name in ("nodes_range", "second_order_range", "slices_active_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InfeasibleConfigError(f"{name} must be ordered, got {(lo, hi)}")
        if self.nodes_range[0] < 2:
            raise InfeasibleConfigError("nodes_range minimum must be >= 2 (center + one neighbor)")
        if self.second_order_range[0] < 0:
            raise InfeasibleConfigError("second_order_range minimum must be >= 0")
        if self.second_order_range[0] > self.nodes_range[1] - 2:
            raise InfeasibleConfigError(
                f"second_order_range minimum {self.second_order_range[0]} leaves no room for "
                f"first-order neighbors with at most {self.nodes_range[1]} nodes"
            )
        if self.slices_active_range[0] < 1 or self.t_slices < 1:
            raise InfeasibleConfigError("slices_active_range and t_slices must be >= 1")
        if self.amount_scale <= 0:
            raise InfeasibleConfigError("amount_scale must be positive")
        if self.slice_seconds < 1:
            raise InfeasibleConfigError("slice_seconds must be >= 1")
        if self.separable and self.phishing_ctr_range[0] <= self.normal_ctr_range[1]:
            raise InfeasibleConfigError(
                "separable mode needs phishing_ctr_range low > normal_ctr_range high"
            )
        for name in ("phishing_ctr_range", "normal_ctr_range"):
            lo, hi = getattr(self, name)
            if lo == 1.0 and self.second_order_range[0] > 0:
                raise InfeasibleConfigError(
                    f"{name}=(1.0, 1.0) forbids non-central edges, but second_order_range "
                    f"requires at least {self.second_order_range[0]} second-order node(s)"
                )
            if hi < 1.0 and self.nodes_range[1] < 3:
                raise InfeasibleConfigError(
                    f"{name} needs non-central edges, which need at least 3 nodes"
                )

    def to_dict(self):
        return asdict(self)


def _address(seed: int, cls: int, index: int, j: int) -> str:
    h = hashlib.sha1(f"{seed}:{cls}:{index}:{j}".encode()).hexdigest()
    return "0x" + h


def _in_range(ec: int, en: int, lo: float, hi: float) -> bool:
    total = ec + en
    return lo * total <= ec <= hi * total


def _edge_counts(rng, ec: int, n1: int, n2: int, smin: int, lo: float, hi: float, target: float):
    """Smallest adjustments giving an integer (center, non-center) split in range."""
    for _ in range(100_000):
        need = n2
        if hi < 1.0:
            need = max(need, 1)
        en_lo = max(need, int(np.ceil(ec * (1 - hi) / hi - 1e-9)))
        en_hi = int(np.floor(ec * (1 - lo) / lo + 1e-9))
        cands = [e for e in range(max(0, en_lo - 1), en_hi + 2) if e >= need and _in_range(ec, e, lo, hi)]
        if cands:
            want = ec * (1 - target) / target
            en = min(cands, key=lambda e: (abs(e - want), e))
            return ec, en, n1, n2
        if n2 > smin:
            n2 -= 1
            n1 += 1
        ec += 1
    raise InfeasibleConfigError(f"cannot realize CTR range {(lo, hi)}")


def _one_address(config: SynthConfig, cls: int, index: int):
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, cls, index]))
    lo, hi = config.phishing_ctr_range if cls == PHISHING else config.normal_ctr_range
    lo_n, hi_n = config.nodes_range
    span = hi_n - lo_n
    # phishing centers draw from the upper part of the size range (many
    # counterparties), normal centers from the lower part, with overlap
    if cls == PHISHING:
        lo_n = lo_n + int(round(0.4 * span))
    else:
        hi_n = lo_n + int(round(0.6 * span))
    n = int(rng.integers(lo_n, hi_n + 1))
    target = float(rng.uniform(lo, hi))
    smin, smax = config.second_order_range
    n_non = n - 1
    if hi >= 1.0 and target >= 1.0:
        n2 = 0
    else:
        cap = min(smax, n_non - 1)
        if cls == PHISHING:
            cap = min(cap, max(smin, int(round(n_non * 0.15))))
        else:
            cap = max(min(cap, int(round(n_non * 0.6))), min(smin, cap))
        n2 = int(rng.integers(min(smin, cap), cap + 1)) if cap >= 0 else 0
    n1 = n_non - n2

    if cls == PHISHING:
        ec = n1 + int(rng.integers(0, 3))
    else:
        ec = int(rng.integers(1, 4, size=n1).sum())
    ec, en, n1, n2 = _edge_counts(rng, ec, n1, n2, min(smin, n2), lo, hi, target)

    center = _address(config.seed, cls, index, 0)
    first = [_address(config.seed, cls, index, 1 + k) for k in range(n1)]
    second = [_address(config.seed, cls, index, 1 + n1 + k) for k in range(n2)]
    scale = config.amount_scale

    rng_slices = _active_slices(rng, config, ec + en)
    edges = []  # (from, to, amount, slot)
    if cls == PHISHING:
        # one-shot victims paying in, a few cash-outs, in bursts
        weights = rng.dirichlet(np.full(rng_slices.size, 0.3))
        partners = list(range(n1)) + [int(rng.integers(0, n1)) for _ in range(ec - n1)]
        for k in partners:
            amount = float(rng.lognormal(2.0, 1.0)) * scale
            slot = int(rng.choice(rng_slices.size, p=weights))
            if rng.random() < 0.85:
                edges.append((first[k], center, amount, slot))
            else:
                edges.append((center, first[k], amount, slot))
        for v in second:
            u = first[int(rng.integers(0, n1))]
            edges.append((u, v, float(rng.lognormal(-0.5, 1.0)) * scale,
                          int(rng.integers(0, rng_slices.size))))
        nonc = first + second
        for _ in range(en - n2):
            i, j = rng.choice(len(nonc), size=2, replace=False)
            edges.append((nonc[int(i)], nonc[int(j)], float(rng.lognormal(-0.5, 1.0)) * scale,
                          int(rng.integers(0, rng_slices.size))))
    else:
        # recurring trading groups: each group is active in one slice and
        # every pair inside it trades, repeatedly
        groups, anchor_of = _groups(rng, n1, n2)
        group_slot = rng.integers(0, rng_slices.size, size=len(groups))
        group_slot[0] = 0
        if len(groups) > 1:
            group_slot[1] = rng_slices.size - 1
        member_group = {}
        for g, members in enumerate(groups):
            for m in members:
                member_group[m] = g
        partners = list(range(n1)) + [int(rng.integers(0, n1)) for _ in range(ec - n1)]
        for k in partners:
            amount = float(rng.lognormal(0.0, 1.0)) * scale
            slot = int(group_slot[member_group[k]])
            if rng.random() < 0.5:
                edges.append((first[k], center, amount, slot))
            else:
                edges.append((center, first[k], amount, slot))
        nodes = first + second
        pairs = []
        for g, members in enumerate(groups):
            for a in range(len(members)):
                for b in range(a + 1, len(members)):
                    pairs.append((members[a], members[b], g))
        for k in range(n2):
            v = n1 + k
            u = anchor_of[v]
            edges.append((nodes[u], nodes[v], float(rng.lognormal(0.5, 1.0)) * scale,
                          int(group_slot[member_group[v]])))
        for m in range(en - n2):
            a, b, g = pairs[m] if m < len(pairs) else pairs[int(rng.integers(0, len(pairs)))]
            if rng.random() < 0.5:
                a, b = b, a
            edges.append((nodes[a], nodes[b], float(rng.lognormal(0.5, 1.0)) * scale,
                          int(group_slot[g])))

    slots = _cover([e[3] for e in edges], rng_slices.size)
    times = _timestamps(rng, config, rng_slices, slots)
    order = np.argsort(times, kind="stable")
    records = [
        TransactionRecord(edges[k][0], edges[k][1], edges[k][2], int(times[k])) for k in order
    ]
    return records, AddressLabel(center, cls == PHISHING)


def _groups(rng, n1: int, n2: int):
    """Partition non-center nodes into groups of 3-5, each anchored on a first-order node.

    Node ids are 0..n1-1 (first order) then n1..n1+n2-1 (second order).
    Returns the groups and, for second-order nodes, their anchor.
    """
    total = n1 + n2
    n_groups = max(1, min(n1, int(round(total / 4))))
    firsts = [int(i) for i in rng.permutation(n1)]
    groups = [[firsts[g]] for g in range(n_groups)]
    rest = firsts[n_groups:] + list(range(n1, total))
    rest = [rest[int(i)] for i in rng.permutation(len(rest))]
    for k, node in enumerate(rest):
        groups[k % n_groups].append(node)
    anchor_of = {m: grp[0] for grp in groups for m in grp[1:] if m >= n1}
    return groups, anchor_of


def _cover(slots, n_active: int) -> np.ndarray:
    """Move edges out of the fullest slots until every active slice has one."""
    slots = np.asarray(slots, dtype=int).copy()
    for k in range(n_active):
        counts = np.bincount(slots, minlength=n_active)
        if counts[k] or counts.max() < 2:
            continue
        donor = np.flatnonzero(slots == int(np.argmax(counts)))
        slots[donor[-1]] = k
    return slots


def _active_slices(rng, config: SynthConfig, n_edges: int) -> np.ndarray:
    T = config.t_slices
    lo, hi = config.slices_active_range
    s = int(rng.integers(min(lo, T), min(hi, T) + 1))
    s = max(1, min(s, n_edges))
    if T == 1 or s == 1:
        return np.array([0])
    middle = rng.permutation(np.arange(1, T - 1))[: s - 2]
    return np.sort(np.concatenate([[0, T - 1], middle])).astype(int)


def _timestamps(rng, config: SynthConfig, active: np.ndarray, slots) -> np.ndarray:
    W, T = config.slice_seconds, config.t_slices
    slots = np.asarray(slots, dtype=int)
    t0 = config.start_time + int(rng.integers(0, 365)) * 86_400
    times = t0 + active[slots] * W + rng.integers(0, W, size=slots.size)
    if active.size > 1 and slots.size > 1:
        # pin the span to exactly T slice widths so per-TEG slicing matches the grid
        first = np.flatnonzero(active[slots] == active[0])
        last = np.flatnonzero(active[slots] == active[-1])
        if first.size and last.size:
            times[first[np.argmin(times[first])]] = t0
            times[last[np.argmax(times[last])]] = t0 + T * W
    return times.astype(np.int64)


def generate(config: SynthConfig) -> Tuple[List[TransactionRecord], List[AddressLabel]]:
    """Build the dataset; identical configs give identical output."""
    config.validate()
    records: List[TransactionRecord] = []
    labels: List[AddressLabel] = []
    for cls, count in ((PHISHING, config.n_phishing), (NORMAL, config.n_normal)):
        for i in range(count):
            recs, lab = _one_address(config, cls, i)
            records.extend(recs)
            labels.append(lab)
    return records, labels
