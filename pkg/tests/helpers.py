import numpy as np
from tegdetector.teg import SliceSpec, Teg, build_teg
from tegdetector.txdata import EgoSubgraph


def make_teg(n, edges, t_slices=None, label=None, weighting="binary", attrs=None):
    """TEG from ``(src, dst, slice)`` or ``(src, dst, slice, amount)`` tuples.

    Timestamps are the slice index, with boundaries 0..T, so slicing is
    exactly the given one.
    """
    T = t_slices or (max(e[2] for e in edges) + 1 if edges else 1)
    src = np.array([e[0] for e in edges], dtype=np.int64)
    dst = np.array([e[1] for e in edges], dtype=np.int64)
    sl = np.array([e[2] for e in edges], dtype=np.int64)
    amt = np.array([e[3] if len(e) > 3 else 1.0 for e in edges], dtype=np.float64)
    if attrs is None:
        attrs = np.zeros((n, 2))
        attrs[:, 0] = 1.0
    return Teg(
        nodes=tuple(f"a{i}" for i in range(n)),
        attrs=np.asarray(attrs, dtype=np.float64),
        t_slices=T,
        src=src,
        dst=dst,
        amount=amt,
        time=sl.copy(),
        slice=sl,
        boundaries=tuple(float(b) for b in range(T + 1)),
        weighting=weighting,
        label=label,
    )


def random_teg(rng, n_max=12, t_slices=3, label=None, p_phish_attr=0.2):
    n = int(rng.integers(2, n_max + 1))
    m = int(rng.integers(1, 3 * n))
    edges = []
    for _ in range(m):
        i, j = rng.choice(n, size=2, replace=False)
        edges.append((int(i), int(j), int(rng.integers(0, t_slices)), float(rng.uniform(0.1, 5))))
    attrs = np.zeros((n, 2))
    flags = rng.random(n) < p_phish_attr
    attrs[flags, 1] = 1.0
    attrs[~flags, 0] = 1.0
    if label is None:
        label = bool(rng.integers(0, 2))
    return make_teg(n, edges, t_slices, label=label, attrs=attrs)


def star_subgraph(k=10, extra=2):
    """Center 0 with ``k`` transactions to ``extra`` leaves (spread round robin)."""
    nodes = tuple(["c"] + [f"l{i}" for i in range(extra)])
    edges = tuple((0, 1 + (i % extra), 1.0 + i, i) for i in range(k))
    return EgoSubgraph(center="c", nodes=nodes, edges=edges)
