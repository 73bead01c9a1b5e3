"""Transaction Evolution Graphs: time-sliced adjacency snapshots of an ego subgraph."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import Tensor, add, hadamard, power, sum_rows, transpose
from .txdata import EgoSubgraph

BOUNDARY_MODES = ("equal_time", "equal_count")
WEIGHTINGS = ("binary", "amount")


@dataclass(frozen=True)
class SliceSpec:
    t_slices: int = 10
    boundary_mode: str = "equal_time"

    def __post_init__(self):
        if self.t_slices < 1:
            raise ValueError(f"t_slices must be >= 1, got {self.t_slices}")
        if self.boundary_mode not in BOUNDARY_MODES:
            raise ValueError(f"boundary_mode must be one of {BOUNDARY_MODES}")


@dataclass(frozen=True, eq=False)
class Teg:
    """T adjacency snapshots over a fixed node set, center at index 0.

    Raw transactions are kept as parallel edge arrays (``src``, ``dst``,
    ``amount``, ``time``, ``slice``); adjacency matrices are derived from
    them, so attacks only ever append edges.
    """

    nodes: Tuple[str, ...]
    attrs: np.ndarray
    t_slices: int
    src: np.ndarray
    dst: np.ndarray
    amount: np.ndarray
    time: np.ndarray
    slice: np.ndarray
    boundaries: Tuple[float, ...]
    weighting: str = "binary"
    label: Optional[bool] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    center_index = 0

    @property
    def center(self) -> str:
        return self.nodes[0]

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def n_transactions(self) -> int:
        return int(self.src.shape[0])

    def slice_counts(self) -> np.ndarray:
        return np.bincount(self.slice, minlength=self.t_slices)

    @property
    def adj(self) -> np.ndarray:
        """Directed per-slice adjacency, shape (T, N, N)."""
        if "adj" not in self._cache:
            self._cache["adj"] = _adjacency(self)
        return self._cache["adj"]

    @property
    def sym_adj(self) -> np.ndarray:
        """Per-slice ``max(A, A^T)``; the model's structural input."""
        if "sym" not in self._cache:
            a = self.adj
            self._cache["sym"] = np.maximum(a, a.transpose(0, 2, 1))
        return self._cache["sym"]

    def with_edges(self, src, dst, amount, time, slices) -> "Teg":
        """Copy with extra transactions appended."""
        return replace(
            self,
            src=np.concatenate([self.src, np.asarray(src, dtype=np.int64)]),
            dst=np.concatenate([self.dst, np.asarray(dst, dtype=np.int64)]),
            amount=np.concatenate([self.amount, np.asarray(amount, dtype=np.float64)]),
            time=np.concatenate([self.time, np.asarray(time, dtype=np.int64)]),
            slice=np.concatenate([self.slice, np.asarray(slices, dtype=np.int64)]),
            _cache={},
        )

    def equals(self, other: "Teg") -> bool:
        return (
            self.nodes == other.nodes
            and self.t_slices == other.t_slices
            and self.weighting == other.weighting
            and self.label == other.label
            and self.boundaries == other.boundaries
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("attrs", "src", "dst", "amount", "time", "slice")
            )
        )


def _adjacency(teg: Teg) -> np.ndarray:
    a = np.zeros((teg.t_slices, teg.n, teg.n))
    if teg.weighting == "binary":
        a[teg.slice, teg.src, teg.dst] = 1.0
    else:
        np.add.at(a, (teg.slice, teg.src, teg.dst), teg.amount)
        a = np.log1p(a)
        rmax = a.max(axis=2, keepdims=True)
        np.divide(a, rmax, out=a, where=rmax > 0)
    return a


def label_attributes(nodes: Sequence[str], labels: Mapping[str, bool]) -> np.ndarray:
    """One-hot ``X``: column 1 marks labeled phishing addresses, column 0 the rest."""
    x = np.zeros((len(nodes), 2))
    for i, a in enumerate(nodes):
        x[i, 1 if labels.get(a, False) else 0] = 1.0
    return x


def assign_slices(times: np.ndarray, spec: SliceSpec):
    """Slice index per timestamp and the T+1 boundaries used."""
    T = spec.t_slices
    times = np.asarray(times, dtype=np.int64)
    if times.size == 0:
        if T > 1 and spec.boundary_mode == "equal_time":
            raise ValueError("equal_time slicing with T > 1 needs at least one edge")
        return np.zeros(0, dtype=np.int64), tuple(0.0 for _ in range(T + 1))
    lo, hi = int(times.min()), int(times.max())
    if spec.boundary_mode == "equal_time":
        span = hi - lo
        if span == 0:
            if T > 1:
                warnings.warn(
                    "zero-duration transaction span; all edges placed in slice 0",
                    RuntimeWarning,
                    stacklevel=2,
                )
            return np.zeros(times.size, dtype=np.int64), tuple(float(lo) for _ in range(T + 1))
        # integer arithmetic keeps boundary membership exact
        idx = np.minimum(((times - lo) * T) // span, T - 1)
        bounds = tuple(lo + k * span / T for k in range(T + 1))
        return idx.astype(np.int64), bounds
    order = np.argsort(times, kind="stable")
    rank = np.empty(times.size, dtype=np.int64)
    rank[order] = np.arange(times.size)
    idx = (rank * T) // times.size
    sorted_t = times[order]
    bounds = [float(lo)]
    for k in range(1, T):
        r = -(-k * times.size // T)
        bounds.append(float(sorted_t[min(r, times.size - 1)]))
    bounds.append(float(hi))
    return idx, tuple(bounds)


def build_teg(
    sub: EgoSubgraph,
    labels: Mapping[str, bool] = None,
    spec: SliceSpec = SliceSpec(),
    weighting: str = "binary",
    label: Optional[bool] = None,
    mask_center: bool = True,
) -> Teg:
    """Slice an ego subgraph's transactions into a :class:`Teg`.

    ``labels`` feed the attribute matrix. With ``mask_center`` the center's
    own label is withheld from ``X`` (it is the prediction target) and
    only used as ``teg.label``; when ``label`` is None it is taken from
    ``labels``.
    """
    if weighting not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}")
    labels = dict(labels or {})
    if label is None and sub.center in labels:
        label = bool(labels[sub.center])
    if mask_center:
        labels.pop(sub.center, None)
    if sub.edges:
        e = np.array([(s, d, t) for s, d, _, t in sub.edges], dtype=np.int64)
        src, dst, times = e[:, 0], e[:, 1], e[:, 2]
        amount = np.array([a for _, _, a, _ in sub.edges], dtype=np.float64)
    else:
        src = dst = times = np.zeros(0, dtype=np.int64)
        amount = np.zeros(0)
    slices, bounds = assign_slices(times, spec)
    return Teg(
        nodes=tuple(sub.nodes),
        attrs=label_attributes(sub.nodes, labels),
        t_slices=spec.t_slices,
        src=src,
        dst=dst,
        amount=amount,
        time=times,
        slice=slices,
        boundaries=bounds,
        weighting=weighting,
        label=label,
    )


def ctr(obj: Union[Teg, EgoSubgraph]) -> float:
    """Share of raw transactions with the center as sender or receiver."""
    if isinstance(obj, Teg):
        total = obj.n_transactions
        central = int(np.count_nonzero((obj.src == 0) | (obj.dst == 0)))
    else:
        total = len(obj.edges)
        central = sum(1 for s, d, _, _ in obj.edges if s == 0 or d == 0)
    if total == 0:
        raise ValueError("CTR is undefined for a graph without transactions")
    return central / total


def normalize_adj(a):
    """Symmetric GCN normalization ``D^-1/2 (A + I) D^-1/2``.

    Accepts an ndarray (returns ndarray) or a :class:`Tensor` (differentiable).
    """
    if isinstance(a, Tensor):
        if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"normalize_adj: expected a square matrix, got {a.shape}")
        at = add(a, np.eye(a.shape[0]))
        d = power(sum_rows(at), -0.5)
        return hadamard(hadamard(at, d), transpose(d))
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"normalize_adj: expected a square matrix, got {a.shape}")
    at = a + np.eye(a.shape[0])
    d = at.sum(axis=1) ** -0.5
    return at * d[:, None] * d[None, :]


# -- on-disk format --------------------------------------------------------

def save_teg(teg: Teg, directory) -> Path:
    """Write ``meta.json``, ``attrs.csv`` and one ``slice_<t>.csv`` per slice."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "N": teg.n,
        "T": teg.t_slices,
        "center": teg.center,
        "label": None if teg.label is None else bool(teg.label),
        "nodes": list(teg.nodes),
        "weighting": teg.weighting,
        "boundaries": [repr(float(b)) for b in teg.boundaries],
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    with (d / "attrs.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "x0", "x1"])
        for i, row in enumerate(teg.attrs):
            w.writerow([i, repr(float(row[0])), repr(float(row[1]))])
    for t in range(teg.t_slices):
        sel = np.flatnonzero(teg.slice == t)
        with (d / f"slice_{t}.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["edge", "src", "dst", "amount", "timestamp"])
            for k in sel:
                w.writerow([int(k), int(teg.src[k]), int(teg.dst[k]),
                            repr(float(teg.amount[k])), int(teg.time[k])])
    return d


def load_teg(directory) -> Teg:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    T, N = int(meta["T"]), int(meta["N"])
    attrs = np.zeros((N, 2))
    with (d / "attrs.csv").open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            attrs[int(row["node"])] = [float(row["x0"]), float(row["x1"])]
    rows = []
    for t in range(T):
        with (d / f"slice_{t}.csv").open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                rows.append((int(row["edge"]), int(row["src"]), int(row["dst"]),
                             float(row["amount"]), int(row["timestamp"]), t))
    rows.sort()
    cols = list(zip(*rows)) if rows else [()] * 6
    nodes = tuple(meta["nodes"])
    if len(nodes) != N or nodes[0] != meta["center"]:
        raise ValueError(f"{d}: inconsistent meta.json (N/center/nodes)")
    return Teg(
        nodes=nodes,
        attrs=attrs,
        t_slices=T,
        src=np.array(cols[1], dtype=np.int64),
        dst=np.array(cols[2], dtype=np.int64),
        amount=np.array(cols[3], dtype=np.float64),
        time=np.array(cols[4], dtype=np.int64),
        slice=np.array(cols[5], dtype=np.int64),
        boundaries=tuple(float(b) for b in meta["boundaries"]),
        weighting=meta.get("weighting", "binary"),
        label=meta["label"],
    )


def build_tegs(
    records,
    labels: Mapping[str, bool],
    centers: Sequence[str] = None,
    spec: SliceSpec = SliceSpec(),
    weighting: str = "binary",
    max_links: int = 100,
    workers: int = 1,
):
    """One TEG per labeled center, in ``centers`` order (default: label order)."""
    from concurrent.futures import ThreadPoolExecutor

    from .txdata import extract_ego_subgraph, index_by_address

    centers = list(labels) if centers is None else list(centers)
    index = index_by_address(records)

    def one(c):
        sub = extract_ego_subgraph(records, c, max_links, index=index)
        return build_teg(sub, labels, spec, weighting)

    if workers <= 1:
        return [one(c) for c in centers]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, centers))
