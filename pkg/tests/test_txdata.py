import json
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tegdetector.txdata import (
    AddressLabel,
    TransactionRecord,
    UnknownAddressError,
    extract_ego_subgraph,
    load_labels,
    load_transactions,
    write_labels,
    write_transactions,
)


def R(a, b, amount=1.0, ts=0):
    return TransactionRecord(a, b, amount, ts)


def test_csv_round_trip(tmp_path):
    recs = [R("a", "b", 1.5, 10), R("b", "c", 0.1 + 0.2, 11)]
    write_transactions(recs, tmp_path / "tx.csv")
    loaded = load_transactions(tmp_path / "tx.csv")
    assert list(loaded) == recs
    assert loaded.errors == []


def test_jsonl_round_trip(tmp_path):
    recs = [R("a", "b", 2.0, 5), R("c", "a", 3.25, 6)]
    write_transactions(recs, tmp_path / "tx.jsonl", format="jsonl")
    assert list(load_transactions(tmp_path / "tx.jsonl", format="jsonl")) == recs


def test_bad_rows_are_reported_with_row_numbers(tmp_path):
    p = tmp_path / "tx.csv"
    p.write_text("from,to,amount,timestamp\na,b,1,0\na,b,-1,1\na,b,1,noon\nc,d,2,3\n")
    loaded = load_transactions(p)
    assert len(loaded) == 2
    assert [e.row for e in loaded.errors] == [2, 3]
    assert "negative" in loaded.errors[0].message


def test_self_loops_are_dropped_and_counted(tmp_path):
    p = tmp_path / "tx.csv"
    p.write_text("from,to,amount,timestamp\na,a,1,0\na,b,1,1\n")
    loaded = load_transactions(p)
    assert len(loaded) == 1 and loaded.self_loops == 1


def test_wrong_header_is_rejected(tmp_path):
    p = tmp_path / "tx.csv"
    p.write_text("src,dst,value,time\na,b,1,0\n")
    with pytest.raises(ValueError):
        load_transactions(p)


def test_labels_round_trip_and_duplicates(tmp_path):
    write_labels([AddressLabel("a", True), AddressLabel("b", False)], tmp_path / "l.csv")
    assert load_labels(tmp_path / "l.csv") == {"a": True, "b": False}
    (tmp_path / "d.csv").write_text("address,is_phishing\na,1\na,0\n")
    with pytest.raises(ValueError, match="duplicate"):
        load_labels(tmp_path / "d.csv")


def test_chain_closure():
    sub = extract_ego_subgraph([R("a", "b"), R("b", "c")], "a")
    assert sub.nodes == ("a", "b", "c")
    assert len(sub.edges) == 2


def test_third_hop_is_excluded():
    sub = extract_ego_subgraph([R("a", "b"), R("b", "c"), R("c", "d")], "a")
    assert set(sub.nodes) == {"a", "b", "c"}


def test_no_second_order_gives_star():
    recs = [R("c", f"l{i}", 1.0, i) for i in range(4)]
    sub = extract_ego_subgraph(recs, "c")
    assert sub.nodes == ("c", "l0", "l1", "l2", "l3")
    assert all(0 in e[:2] for e in sub.edges)


def test_unknown_center():
    with pytest.raises(UnknownAddressError):
        extract_ego_subgraph([R("a", "b")], "zzz")


def test_hub_keeps_highest_amount_spokes():
    # a first-order hub with 5 spokes and max_links=3 keeps its 3 largest
    recs = [R("c", "h", 1.0, 0)] + [R("h", f"s{i}", float(i + 1), i + 1) for i in range(5)]
    sub = extract_ego_subgraph(recs, "c", max_links=3)
    kept = sorted(e[2] for e in sub.edges if 0 not in e[:2])
    assert kept == [3.0, 4.0, 5.0]
    assert set(sub.nodes) == {"c", "h", "s2", "s3", "s4"}


def test_center_edges_are_never_capped():
    recs = [R("c", f"l{i}", 1.0, i) for i in range(10)]
    sub = extract_ego_subgraph(recs, "c", max_links=2)
    assert len(sub.edges) == 10


def test_tie_break_earlier_timestamp_then_address():
    recs = [R("c", "h", 1.0, 0), R("h", "y", 5.0, 2), R("h", "x", 5.0, 2), R("h", "z", 5.0, 1)]
    sub = extract_ego_subgraph(recs, "c", max_links=2)
    assert set(sub.nodes) == {"c", "h", "z", "x"}


def test_node_order_center_first_then_by_first_timestamp():
    recs = [R("c", "b", 1.0, 5), R("a", "c", 1.0, 3), R("b", "y", 1.0, 9), R("a", "x", 1.0, 7)]
    sub = extract_ego_subgraph(recs, "c")
    assert sub.nodes == ("c", "a", "b", "x", "y")


addr = st.sampled_from([f"n{i}" for i in range(9)])
record = st.builds(R, addr, addr, st.floats(0, 100, allow_nan=False), st.integers(0, 50))


@settings(max_examples=60, deadline=None)
@given(st.lists(record, min_size=1, max_size=40), st.integers(1, 4))
def test_ego_invariants(recs, max_links):
    recs = [r for r in recs if r.from_addr != r.to_addr]
    if not recs:
        return
    center = recs[0].from_addr
    sub = extract_ego_subgraph(recs, center, max_links)
    assert sub.nodes[0] == center
    assert len(set(sub.nodes)) == len(sub.nodes)
    # every node within two undirected hops over kept edges
    nbr = {i: set() for i in range(sub.n)}
    for s, d, _, _ in sub.edges:
        nbr[s].add(d)
        nbr[d].add(s)
    reach = {0} | nbr[0]
    for u in list(nbr[0]):
        reach |= nbr[u]
    assert reach == set(range(sub.n))
    # non-center edges per non-center node respect the cap
    load = Counter()
    for s, d, _, _ in sub.edges:
        if 0 not in (s, d):
            load[s] += 1
            load[d] += 1
    assert all(v <= max_links for v in load.values())
    # every center transaction is kept
    central = sum(center in (r.from_addr, r.to_addr) for r in recs)
    assert sum(0 in e[:2] for e in sub.edges) == central
