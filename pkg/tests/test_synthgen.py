import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tegdetector.synthgen import InfeasibleConfigError, SynthConfig, generate
from tegdetector.teg import SliceSpec, build_tegs, ctr
from tegdetector.txdata import extract_ego_subgraph, index_by_address


def center_ctrs(records, labels):
    """Recount each center's ratio straight from the record list."""
    out = {}
    for lab in labels:
        mine = [r for r in records if lab.addr in (r.from_addr, r.to_addr)]
        nbrs = {r.to_addr if r.from_addr == lab.addr else r.from_addr for r in mine}
        # the neighborhood is disjoint per center, so count its transactions
        hood = nbrs | {lab.addr}
        second = {x for r in records for x in (r.from_addr, r.to_addr)
                  if (r.from_addr in nbrs or r.to_addr in nbrs)}
        hood |= second
        total = sum(1 for r in records if r.from_addr in hood and r.to_addr in hood)
        out[lab.addr] = (len(mine) / total, lab.is_phishing)
    return out


def test_default_ranges_hold_by_independent_count():
    cfg = SynthConfig(n_phishing=40, n_normal=40)
    records, labels = generate(cfg)
    for value, phishing in center_ctrs(records, labels).values():
        lo, hi = cfg.phishing_ctr_range if phishing else cfg.normal_ctr_range
        assert lo <= value <= hi


def test_full_default_dataset_via_subgraphs():
    cfg = SynthConfig()
    records, labels = generate(cfg)
    assert len(labels) == 200
    index = index_by_address(records)
    for lab in labels:
        sub = extract_ego_subgraph(records, lab.addr, index=index)
        lo, hi = cfg.phishing_ctr_range if lab.is_phishing else cfg.normal_ctr_range
        assert lo <= ctr(sub) <= hi
        assert sub.n <= cfg.nodes_range[1]


def test_same_seed_same_bytes(tmp_path):
    from tegdetector.txdata import write_labels, write_transactions

    for k in range(2):
        recs, labs = generate(SynthConfig(n_phishing=5, n_normal=5, seed=7))
        write_transactions(recs, tmp_path / f"t{k}.csv")
        write_labels(labs, tmp_path / f"l{k}.csv")
    assert (tmp_path / "t0.csv").read_bytes() == (tmp_path / "t1.csv").read_bytes()
    assert (tmp_path / "l0.csv").read_bytes() == (tmp_path / "l1.csv").read_bytes()


def test_different_seed_differs():
    a, _ = generate(SynthConfig(n_phishing=3, n_normal=3, seed=1))
    b, _ = generate(SynthConfig(n_phishing=3, n_normal=3, seed=2))
    assert a != b


def test_addresses_do_not_shift_when_counts_change():
    small, _ = generate(SynthConfig(n_phishing=2, n_normal=2))
    big, _ = generate(SynthConfig(n_phishing=4, n_normal=2))
    first = {r for r in small if r in set(big)}
    assert len(first) > 0.3 * len(small)


def test_ctr_one_gives_a_star():
    recs, labs = generate(SynthConfig(n_phishing=1, n_normal=0, phishing_ctr_range=(1.0, 1.0),
                                      second_order_range=(0, 0)))
    center = labs[0].addr
    assert all(center in (r.from_addr, r.to_addr) for r in recs)


def test_ctr_one_with_required_second_order_is_infeasible():
    with pytest.raises(InfeasibleConfigError):
        generate(SynthConfig(n_phishing=1, n_normal=0, phishing_ctr_range=(1.0, 1.0),
                             second_order_range=(2, 5)))


@pytest.mark.parametrize("kwargs", [
    dict(n_phishing=0, n_normal=0),
    dict(phishing_ctr_range=(0.5, 0.4)),
    dict(normal_ctr_range=(0.0, 0.3)),
    dict(nodes_range=(1, 5)),
    dict(amount_scale=0.0),
    dict(phishing_ctr_range=(0.3, 0.9)),
])
def test_invalid_configs(kwargs):
    with pytest.raises(InfeasibleConfigError):
        generate(SynthConfig(**kwargs))


def test_archetypes_differ_in_counterparties_and_repeats():
    recs, labs = generate(SynthConfig(n_phishing=30, n_normal=30))
    index = index_by_address(recs)
    stats = {True: [], False: []}
    for lab in labs:
        sub = extract_ego_subgraph(recs, lab.addr, index=index)
        central = [(s, d) for s, d, _, _ in sub.edges if 0 in (s, d)]
        distinct = len({s + d for s, d in central})
        stats[lab.is_phishing].append(distinct / len(central))
    # phishing counterparties are mostly one-shot, normal ones repeat
    assert np.mean(stats[True]) > np.mean(stats[False])


def test_slices_span_the_full_grid():
    recs, labs = generate(SynthConfig(n_phishing=5, n_normal=5, slices_active_range=(10, 10)))
    tegs = build_tegs(recs, {l.addr: l.is_phishing for l in labs}, spec=SliceSpec(10))
    for teg in tegs:
        assert np.count_nonzero(teg.slice_counts()) == 10


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.5, 1.0), st.floats(0.05, 0.45))
def test_random_ranges_are_realized(seed, p_lo, n_hi):
    cfg = SynthConfig(n_phishing=3, n_normal=3, seed=seed, phishing_ctr_range=(p_lo, 1.0),
                      normal_ctr_range=(0.05, n_hi), separable=p_lo > n_hi)
    recs, labs = generate(cfg)
    index = index_by_address(recs)
    for lab in labs:
        value = ctr(extract_ego_subgraph(recs, lab.addr, index=index))
        lo, hi = cfg.phishing_ctr_range if lab.is_phishing else cfg.normal_ctr_range
        assert lo <= value <= hi
