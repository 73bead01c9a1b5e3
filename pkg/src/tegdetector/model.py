"""TEGDetector forward pass.

Per time slice, each level runs a GCN over the slice adjacency and feeds the
result through gated recurrent updates that carry node (or cluster) state
across slices; a soft cluster assignment then pools the level into the next
one, down to a single graph-level vector per slice. A learned softmax over
slices weights those vectors before the MLP head.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (
    Tensor,
    add,
    as_tensor,
    clamp_min,
    col_max,
    concat_cols,
    concat_rows,
    hadamard,
    log,
    matmul,
    relu,
    scale,
    sigmoid,
    slice_cols,
    softmax_rows,
    sub,
    sum_all,
    tanh,
    transpose,
)
from .teg import Teg, normalize_adj

POOLINGS = ("cluster", "mean", "max")
READOUTS = ("time_coeff", "sum")
GATES = ("Wz", "Uz", "Wr", "Ur", "W", "U")
GATE_BIASES = ("bz", "br", "bh")


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    repr_dim: int = 32
    pool_levels: int = 2
    assign_ratio: float = 0.25
    pooling: str = "cluster"
    readout: str = "time_coeff"
    mlp_hidden: int = 32
    t_slices: int = 10
    in_dim: int = 2
    max_nodes: int = 64
    classes: int = 2

    def __post_init__(self):
        for name in ("hidden_dim", "repr_dim", "pool_levels", "mlp_hidden", "t_slices", "in_dim", "max_nodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 < self.assign_ratio <= 1:
            raise ValueError(f"assign_ratio must lie in (0, 1], got {self.assign_ratio}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}, got {self.readout!r}")
        if self.classes != 2:
            raise ValueError("only binary classification is supported")

    def pool_widths(self) -> List[int]:
        """Cluster-logit columns held by each pooling level's parameters."""
        if self.pooling != "cluster":
            return [1] * self.pool_levels
        widths = [
            max(1, round(self.max_nodes * self.assign_ratio ** (lvl + 1)))
            for lvl in range(self.pool_levels - 1)
        ]
        return widths + [1]

    def cluster_counts(self, n: int) -> List[int]:
        """Rows at each level for an ``n``-node graph, ending at 1."""
        if self.pooling != "cluster":
            return [n] + [1] * self.pool_levels
        widths = self.pool_widths()
        counts = [n]
        for lvl in range(self.pool_levels - 1):
            counts.append(min(widths[lvl], max(1, round(n * self.assign_ratio ** (lvl + 1)))))
        counts.append(1)
        return counts

    def to_dict(self):
        return asdict(self)


class ModelParams(OrderedDict):
    """Ordered name -> float64 array mapping with flatten helpers."""

    def flat(self) -> np.ndarray:
        if not self:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.values()])

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        out = ModelParams()
        pos = 0
        for k, v in self.items():
            out[k] = np.array(vec[pos:pos + v.size], dtype=np.float64).reshape(v.shape)
            pos += v.size
        if pos != len(vec):
            raise ValueError(f"flat vector has {len(vec)} entries, expected {pos}")
        return out

    def copy(self) -> "ModelParams":
        return ModelParams((k, v.copy()) for k, v in self.items())

    @property
    def size(self) -> int:
        return sum(v.size for v in self.values())

    def tensors(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.items()}


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases and zero (uniform) time logits."""
    rng = np.random.default_rng(seed)
    H, d, m = config.hidden_dim, config.repr_dim, config.mlp_hidden

    def glorot(fan_in, fan_out):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-s, s, size=(fan_in, fan_out))

    p = ModelParams()
    widths = config.pool_widths()
    for lvl in range(config.pool_levels):
        in_dim = (config.in_dim if lvl == 0 else d) + d
        p[f"level{lvl}.W0"] = glorot(in_dim, H)
        p[f"level{lvl}.b0"] = np.zeros((1, H))
        p[f"level{lvl}.W1"] = glorot(H, d)
        p[f"level{lvl}.b1"] = np.zeros((1, d))
        for g in GATES:
            p[f"level{lvl}.{g}"] = glorot(d, d)
        for b in GATE_BIASES:
            p[f"level{lvl}.{b}"] = np.zeros((1, d))
        if config.pooling == "cluster" and widths[lvl] > 1:
            p[f"pool{lvl}.W0"] = glorot(d, H)
            p[f"pool{lvl}.b0"] = np.zeros((1, H))
            p[f"pool{lvl}.W1"] = glorot(H, widths[lvl])
            p[f"pool{lvl}.b1"] = np.zeros((1, widths[lvl]))
    if config.readout == "time_coeff":
        p["readout.alpha"] = np.zeros((1, config.t_slices))
    p["mlp.W0"] = glorot(d, m)
    p["mlp.b0"] = np.zeros((1, m))
    p["mlp.W1"] = glorot(m, config.classes)
    p["mlp.b1"] = np.zeros((1, config.classes))
    return p


def _check(t: Tensor, where: str):
    if not np.isfinite(t.data).all():
        raise NonFiniteError(f"non-finite values in {where}")


def gcn(x, a_hat, w0, w1, b0=None, b1=None) -> Tensor:
    """Two-layer GCN ``Â relu(Â x W0 + b0) W1 + b1`` with a linear output layer."""
    hidden = matmul(a_hat, matmul(x, w0))
    if b0 is not None:
        hidden = add(hidden, b0)
    out = matmul(a_hat, matmul(relu(hidden), w1))
    return out if b1 is None else add(out, b1)


def ef_extract(x, h_prev, adj=None, params: Mapping = None, *, a_hat=None, where: str = "") -> Tensor:
    """One EF-Extractor step for a single slice.

    ``x`` is the level input (attributes at level 0, pooled features above),
    ``h_prev`` the recurrent state (zeros before the first slice). The GCN
    sees ``[x | h_prev]``; gates follow the GRU update with ``Z`` as input.
    ``params`` maps ``W0, W1, Wz, Uz, Wr, Ur, W, U`` to tensors/arrays;
    the biases ``b0, b1, bz, br, bh`` are optional.
    """
    p = {k: as_tensor(v) for k, v in params.items()}
    h_prev = as_tensor(h_prev)
    if a_hat is None:
        a_hat = normalize_adj(adj)
    a_hat = as_tensor(a_hat)
    z_struct = gcn(concat_cols([x, h_prev]), a_hat, p["W0"], p["W1"], p.get("b0"), p.get("b1"))
    _check(z_struct, f"{where} GCN output")

    def gate(w, u, b, state):
        pre = add(matmul(z_struct, p[w]), matmul(state, p[u]))
        return pre if b not in p else add(pre, p[b])

    z = sigmoid(gate("Wz", "Uz", "bz", h_prev))
    _check(z, f"{where} update gate")
    r = sigmoid(gate("Wr", "Ur", "br", h_prev))
    _check(r, f"{where} reset gate")
    cand = tanh(gate("W", "U", "bh", hadamard(r, h_prev)))
    _check(cand, f"{where} candidate state")
    return add(h_prev, hadamard(z, sub(cand, h_prev)))


def pool(h, adj, params: Optional[Mapping] = None, n_out: int = 1, *, a_hat=None,
         mode: str = "cluster", need_adj: bool = True):
    """Aggregate ``h`` (N x d) into ``n_out`` clusters.

    Returns ``(h_pool, a_pool, C)``. In ``cluster`` mode ``C`` is the
    row-softmax of a GCN over ``(adj, h)`` restricted to the first
    ``n_out`` logit columns; ``mean``/``max`` collapse to one row and
    return a 1x1 zero adjacency.
    """
    h = as_tensor(h)
    n = h.shape[0]
    if mode == "mean":
        c = np.full((n, 1), 1.0 / n)
        return matmul(c.T, h), (Tensor(np.zeros((1, 1))) if need_adj else None), Tensor(c)
    if mode == "max":
        return col_max(h), (Tensor(np.zeros((1, 1))) if need_adj else None), None
    adj = as_tensor(adj)
    if n_out == 1:
        ones = np.ones((n, 1))
        h_pool = matmul(ones.T, h)
        a_pool = matmul(matmul(ones.T, adj), ones) if need_adj else None
        return h_pool, a_pool, Tensor(ones)
    if a_hat is None:
        a_hat = normalize_adj(adj)
    w1 = as_tensor(params["W1"])
    b1 = params.get("b1")
    logits = gcn(h, as_tensor(a_hat), as_tensor(params["W0"]), slice_cols(w1, 0, n_out),
                 params.get("b0"), None if b1 is None else slice_cols(as_tensor(b1), 0, n_out))
    c = softmax_rows(logits)
    ct = transpose(c)
    h_pool = matmul(ct, h)
    a_pool = matmul(matmul(ct, adj), c) if need_adj else None
    return h_pool, a_pool, c


def _level_params(P: Mapping[str, Tensor], lvl: int):
    prefix = f"level{lvl}."
    return {k[len(prefix):]: v for k, v in P.items() if k.startswith(prefix)}


def _pool_params(P: Mapping[str, Tensor], lvl: int):
    prefix = f"pool{lvl}."
    out = {k[len(prefix):]: v for k, v in P.items() if k.startswith(prefix)}
    return out or None


def _as_param_tensors(params) -> Dict[str, Tensor]:
    if isinstance(params, ModelParams):
        return params.tensors()
    return {k: as_tensor(v) for k, v in params.items()}


def slice_features(teg: Teg, params, config: ModelConfig, adjacency=None) -> Tensor:
    """Graph-level feature per slice, stacked as a (T, d) tensor.

    ``adjacency`` overrides ``teg.sym_adj`` (e.g. a list of tensors that
    require gradients).
    """
    P = _as_param_tensors(params)
    T, d, L = config.t_slices, config.repr_dim, config.pool_levels
    if teg.t_slices != T:
        raise ValueError(f"TEG has {teg.t_slices} slices, model expects {T}")
    counts = config.cluster_counts(teg.n)
    if adjacency is None:
        adjacency = teg.sym_adj
        a_hats = teg._cache.get("a_hat")
        if a_hats is None:
            a_hats = [Tensor(normalize_adj(a)) for a in adjacency]
            teg._cache["a_hat"] = a_hats
        adjacency = [Tensor(a) for a in adjacency]
    else:
        adjacency = [as_tensor(a) for a in adjacency]
        a_hats = [normalize_adj(a) for a in adjacency]
    x0 = Tensor(teg.attrs)
    states = [Tensor(np.zeros((counts[lvl], d))) for lvl in range(L)]
    levels = [_level_params(P, lvl) for lvl in range(L)]
    pools = [_pool_params(P, lvl) for lvl in range(L)]
    pooled = []
    for t in range(T):
        x, a, a_hat = x0, adjacency[t], a_hats[t]
        for lvl in range(L):
            h = ef_extract(x, states[lvl], params=levels[lvl], a_hat=a_hat,
                           where=f"slice {t} level {lvl}")
            states[lvl] = h
            last = lvl == L - 1
            x, a, _ = pool(h, a, pools[lvl], counts[lvl + 1], mode=config.pooling,
                           need_adj=not last)
            if not last:
                a_hat = normalize_adj(a)
        pooled.append(x)
    return concat_rows(pooled)


def time_coefficients(params, config: ModelConfig) -> np.ndarray:
    """Slice weights used by the readout (all ones in ``sum`` mode)."""
    if config.readout == "sum":
        return np.ones(config.t_slices)
    a = np.asarray(params["readout.alpha"].data if isinstance(params["readout.alpha"], Tensor)
                   else params["readout.alpha"]).ravel()
    e = np.exp(a - a.max())
    return e / e.sum()


def forward(teg: Teg, params, config: ModelConfig, adjacency=None) -> Tuple[Tensor, Tensor]:
    """Class probabilities ``[normal, phishing]`` and MLP logits, each 1x2."""
    P = _as_param_tensors(params)
    feats = slice_features(teg, P, config, adjacency)
    if config.readout == "time_coeff":
        alpha = softmax_rows(P["readout.alpha"])
    else:
        alpha = Tensor(np.ones((1, config.t_slices)))
    h_i = matmul(alpha, feats)
    hidden = tanh(add(matmul(h_i, P["mlp.W0"]), P["mlp.b0"]))
    logits = add(matmul(hidden, P["mlp.W1"]), P["mlp.b1"])
    _check(logits, "MLP logits")
    return softmax_rows(logits), logits


def cross_entropy(probs: Tensor, label: int) -> Tensor:
    """``-sum_j Q_j ln Y_j`` for one sample, with ``Y`` clamped at 1e-12."""
    q = np.zeros(probs.shape)
    q[0, int(label)] = 1.0
    return scale(sum_all(hadamard(q, log(clamp_min(probs, 1e-12)))), -1.0)


def loss(batch: Sequence[Tuple[Teg, int]], params, config: ModelConfig) -> Tensor:
    """Mean cross-entropy over ``batch`` of ``(teg, label)`` pairs."""
    if not batch:
        raise ValueError("empty batch")
    P = _as_param_tensors(params)
    total = None
    for teg, label in batch:
        if label not in (0, 1, True, False):
            raise ValueError(f"labels must be 0/1, got {label!r}")
        probs, _ = forward(teg, P, config)
        ce = cross_entropy(probs, int(label))
        total = ce if total is None else add(total, ce)
    return scale(total, 1.0 / len(batch))


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path, params: ModelParams, config: ModelConfig, extra: Mapping = None):
    """JSON file: config plus name -> {shape, data} with repr-exact floats."""
    payload = {
        "format": "tegdetector-checkpoint/1",
        "config": config.to_dict(),
        "params": {
            k: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]}
            for k, v in params.items()
        },
    }
    if extra:
        payload["extra"] = dict(extra)
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")


def load_checkpoint(path) -> Tuple[ModelParams, ModelConfig, dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != "tegdetector-checkpoint/1":
        raise ValueError(f"{path}: not a tegdetector checkpoint")
    config = ModelConfig(**payload["config"])
    params = ModelParams()
    for k, v in payload["params"].items():
        params[k] = np.array(v["data"], dtype=np.float64).reshape(v["shape"])
    return params, config, payload.get("extra", {})
