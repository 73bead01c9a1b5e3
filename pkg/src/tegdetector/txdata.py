"""Transaction ingestion, address labels and two-hop ego subgraphs."""
from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Sequence, Tuple, Union

logger = logging.getLogger(__name__)

FIELDS = ("from", "to", "amount", "timestamp")


class TransactionRecord(NamedTuple):
    from_addr: str
    to_addr: str
    amount: float
    timestamp: int


class AddressLabel(NamedTuple):
    addr: str
    is_phishing: bool


@dataclass
class RowError:
    row: int
    message: str

    def __str__(self):
        return f"row {self.row}: {self.message}"


@dataclass
class LoadResult:
    """Parsed records plus every row that failed to parse."""

    records: List[TransactionRecord]
    errors: List[RowError] = field(default_factory=list)
    self_loops: int = 0

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


class UnknownAddressError(KeyError):
    pass


def _parse_row(raw: dict) -> TransactionRecord:
    missing = [k for k in FIELDS if raw.get(k) in (None, "")]
    if missing:
        raise ValueError(f"missing field(s) {', '.join(missing)}")
    try:
        amount = float(raw["amount"])
    except (TypeError, ValueError):
        raise ValueError(f"non-numeric amount {raw['amount']!r}") from None
    if not amount >= 0:
        raise ValueError(f"negative amount {raw['amount']!r}")
    ts_raw = raw["timestamp"]
    try:
        if isinstance(ts_raw, bool):
            raise ValueError
        if isinstance(ts_raw, (int, float)):
            ts = int(ts_raw)
            if ts != ts_raw:
                raise ValueError
        else:
            ts = int(str(ts_raw).strip())
    except (TypeError, ValueError):
        raise ValueError(f"non-numeric timestamp {ts_raw!r}") from None
    if ts < 0:
        raise ValueError(f"negative timestamp {ts}")
    return TransactionRecord(str(raw["from"]), str(raw["to"]), amount, ts)


def load_transactions(path: Union[str, Path], format: str = "csv") -> LoadResult:
    """Read transaction records in file order.

    Malformed rows are collected in ``result.errors`` with their 1-based data
    row number instead of aborting the load. Self-loops are dropped and
    counted in ``result.self_loops``.
    """
    path = Path(path)
    if format not in ("csv", "jsonl"):
        raise ValueError(f"unknown format {format!r}; expected 'csv' or 'jsonl'")
    try:
        fh = path.open(encoding="utf-8", newline="")
    except OSError as exc:
        raise OSError(f"cannot read transactions from {path}: {exc}") from exc

    result = LoadResult(records=[])
    with fh:
        if format == "csv":
            reader = csv.DictReader(fh)
            if reader.fieldnames is not None and list(reader.fieldnames) != list(FIELDS):
                raise ValueError(
                    f"{path}: expected header {','.join(FIELDS)}, got {','.join(reader.fieldnames)}"
                )
            rows: Iterable = ((i, r) for i, r in enumerate(reader, start=1))
        else:
            rows = _jsonl_rows(fh, result)
        for i, raw in rows:
            try:
                rec = _parse_row(raw)
            except ValueError as exc:
                result.errors.append(RowError(i, str(exc)))
                continue
            if rec.from_addr == rec.to_addr:
                result.self_loops += 1
                continue
            result.records.append(rec)
    if result.errors:
        logger.warning("%s: %d malformed row(s)", path, len(result.errors))
    return result


def _jsonl_rows(fh, result: LoadResult):
    for i, line in enumerate(fh, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            result.errors.append(RowError(i, f"invalid JSON: {exc.msg}"))
            continue
        if not isinstance(obj, dict):
            result.errors.append(RowError(i, "expected a JSON object"))
            continue
        yield i, obj


def write_transactions(records: Sequence[TransactionRecord], path, format: str = "csv"):
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        if format == "csv":
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FIELDS)
            for r in records:
                w.writerow([r.from_addr, r.to_addr, repr(float(r.amount)), int(r.timestamp)])
        elif format == "jsonl":
            for r in records:
                fh.write(
                    json.dumps(
                        {"from": r.from_addr, "to": r.to_addr,
                         "amount": float(r.amount), "timestamp": int(r.timestamp)}
                    )
                    + "\n"
                )
        else:
            raise ValueError(f"unknown format {format!r}")


def load_labels(path) -> Dict[str, bool]:
    """Read an ``address,is_phishing`` CSV into a dict."""
    labels: Dict[str, bool] = {}
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != ["address", "is_phishing"]:
            raise ValueError(f"{path}: expected header address,is_phishing")
        for i, row in enumerate(reader, start=1):
            flag = (row["is_phishing"] or "").strip()
            if flag not in ("0", "1"):
                raise ValueError(f"{path}: row {i}: is_phishing must be 0 or 1, got {flag!r}")
            addr = row["address"]
            if addr in labels:
                raise ValueError(f"{path}: row {i}: duplicate address {addr!r}")
            labels[addr] = flag == "1"
    return labels


def write_labels(labels: Iterable[AddressLabel], path):
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["address", "is_phishing"])
        for lab in labels:
            w.writerow([lab.addr, int(bool(lab.is_phishing))])


@dataclass(frozen=True)
class EgoSubgraph:
    """Two-hop transaction neighborhood of ``center``.

    ``edges`` holds ``(from_index, to_index, amount, timestamp)`` with indices
    into ``nodes``; ``nodes[0]`` is the center.
    """

    center: str
    nodes: Tuple[str, ...]
    edges: Tuple[Tuple[int, int, float, int], ...]

    @property
    def n(self) -> int:
        return len(self.nodes)


def _edge_key(rec: TransactionRecord):
    return (-rec.amount, rec.timestamp, rec.from_addr, rec.to_addr)


def index_by_address(records: Sequence[TransactionRecord]) -> Dict[str, List[int]]:
    """Map each address to the positions of records it takes part in."""
    idx: Dict[str, List[int]] = defaultdict(list)
    for i, r in enumerate(records):
        if r.from_addr == r.to_addr:
            continue
        idx[r.from_addr].append(i)
        idx[r.to_addr].append(i)
    return idx


def extract_ego_subgraph(
    records: Sequence[TransactionRecord],
    center: str,
    max_links: int = 100,
    index: Dict[str, List[int]] = None,
) -> EgoSubgraph:
    """Collect the center, its 1st- and 2nd-order neighbors and their edges.

    Every transaction touching the center is kept. Edges not touching the
    center are retained greedily by descending amount (then earlier
    timestamp, then sender/receiver address) while both endpoints still
    have fewer than ``max_links`` such edges. Nodes that end up more than
    two hops from the center are pruned.

    Pass a precomputed ``index`` (see :func:`index_by_address`) when
    extracting many centers from the same records.
    """
    if max_links < 1:
        raise ValueError(f"max_links must be positive, got {max_links}")
    if index is None:
        index = index_by_address(records)
    if center not in index:
        raise UnknownAddressError(f"unknown address {center!r}")

    center_recs = [records[i] for i in index[center]]
    first = {r.to_addr if r.from_addr == center else r.from_addr for r in center_recs}

    # candidate non-center edges touching a 1st-order node, capped per node
    second = set()
    for u in sorted(first):
        own = [records[i] for i in index[u] if center not in (records[i].from_addr, records[i].to_addr)]
        own.sort(key=_edge_key)
        for r in own[:max_links]:
            v = r.to_addr if r.from_addr == u else r.from_addr
            if v not in first:
                second.add(v)

    members = first | second
    seen = set()
    candidates = []
    for u in sorted(members):
        for i in index[u]:
            if i in seen:
                continue
            r = records[i]
            if center in (r.from_addr, r.to_addr):
                continue
            if r.from_addr in members and r.to_addr in members:
                seen.add(i)
                candidates.append((_edge_key(r), i))
    candidates.sort()

    load: Dict[str, int] = defaultdict(int)
    kept = []
    for _, i in candidates:
        r = records[i]
        if load[r.from_addr] < max_links and load[r.to_addr] < max_links:
            load[r.from_addr] += 1
            load[r.to_addr] += 1
            kept.append(i)

    # prune nodes beyond two hops over retained edges
    adj: Dict[str, set] = defaultdict(set)
    for i in kept:
        r = records[i]
        adj[r.from_addr].add(r.to_addr)
        adj[r.to_addr].add(r.from_addr)
    hop2 = set()
    for u in first:
        hop2 |= adj[u]
    hop2 -= first
    hop2.discard(center)
    kept = [
        i for i in kept
        if records[i].from_addr in first | hop2 and records[i].to_addr in first | hop2
    ]

    retained = sorted(index[center]) + sorted(kept)
    first_seen: Dict[str, int] = {}
    for i in retained:
        r = records[i]
        for a in (r.from_addr, r.to_addr):
            if a not in first_seen or r.timestamp < first_seen[a]:
                first_seen[a] = r.timestamp
    order1 = sorted(first, key=lambda a: (first_seen[a], a))
    order2 = sorted(hop2, key=lambda a: (first_seen[a], a))
    nodes = (center, *order1, *order2)
    pos = {a: k for k, a in enumerate(nodes)}
    edges = tuple(
        (pos[records[i].from_addr], pos[records[i].to_addr],
         float(records[i].amount), int(records[i].timestamp))
        for i in retained
    )
    return EgoSubgraph(center=center, nodes=nodes, edges=edges)
