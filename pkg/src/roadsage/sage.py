"""GraphSAGE in plain numpy: neighbour sampling, aggregation, forward/backward, Adam.

Row-vector convention throughout: a layer computes ``act(inp @ W + b)``
where ``inp`` is ``[h_self || agg]`` (self-concatenation) or just ``agg``.
All arithmetic is float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DimensionMismatchError, LabelError, ParseError, ShapeError, StaleCacheError
from .graph import DualGraph

AGGREGATORS = ("mean", "mean_pool")
CHECKPOINT_FORMAT = "roadsage-sage/1"


@dataclass(frozen=True)
class SageConfig:
    input_dim: int
    hidden_units: int = 512
    embedding_dim: int = 64
    K: int = 2
    aggregator: str = "mean_pool"
    # fanouts[h] caps the neighbours sampled at hop h+1 from the batch; None = all
    fanouts: tuple[int | None, ...] = (25, 10)
    dropout: float = 0.0
    self_concat: bool = True
    n_classes: int = 0
    hidden_activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if len(self.fanouts) != self.K:
            raise ConfigError(f"need {self.K} fanouts, got {len(self.fanouts)}")
        if any(f is not None and f < 1 for f in self.fanouts):
            raise ConfigError("fanouts must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"aggregator must be one of {AGGREGATORS}")
        if self.hidden_activation not in ("relu", "identity"):
            raise ConfigError("hidden_activation must be relu or identity")
        object.__setattr__(self, "fanouts", tuple(self.fanouts))

    def layer_dims(self) -> list[int]:
        return [self.input_dim] + [self.hidden_units] * (self.K - 1) + [self.embedding_dim]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fanouts"] = list(self.fanouts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SageConfig":
        d = dict(d)
        d["fanouts"] = tuple(d.get("fanouts", (25, 10)))
        return cls(**d)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class SageModel:
    """Parameter container. ``version`` increases on every in-place update."""

    def __init__(self, config: SageConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = params if params is not None else self._init_params()
        self.version = 0
        self._check_shapes()

    def _init_params(self) -> dict[str, np.ndarray]:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        dims = cfg.layer_dims()
        p: dict[str, np.ndarray] = {}
        for k in range(1, cfg.K + 1):
            d_in, d_out = dims[k - 1], dims[k]
            agg_dim = d_in
            if cfg.aggregator == "mean_pool":
                p[f"pool_W{k}"] = glorot(rng, d_in, d_in)
                p[f"pool_b{k}"] = np.zeros(d_in)
            width = d_in + agg_dim if cfg.self_concat else agg_dim
            p[f"W{k}"] = glorot(rng, width, d_out)
            p[f"b{k}"] = np.zeros(d_out)
        if cfg.n_classes:
            p["W_out"] = glorot(rng, dims[-1], cfg.n_classes)
            p["b_out"] = np.zeros(cfg.n_classes)
        return p

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        cfg = self.config
        dims = cfg.layer_dims()
        shapes = {}
        for k in range(1, cfg.K + 1):
            d_in, d_out = dims[k - 1], dims[k]
            if cfg.aggregator == "mean_pool":
                shapes[f"pool_W{k}"] = (d_in, d_in)
                shapes[f"pool_b{k}"] = (d_in,)
            shapes[f"W{k}"] = ((2 if cfg.self_concat else 1) * d_in, d_out)
            shapes[f"b{k}"] = (d_out,)
        if cfg.n_classes:
            shapes["W_out"] = (dims[-1], cfg.n_classes)
            shapes["b_out"] = (cfg.n_classes,)
        return shapes

    def _check_shapes(self) -> None:
        want = self.expected_shapes()
        if set(want) != set(self.params):
            raise ShapeError(f"parameter names {sorted(self.params)} != expected {sorted(want)}")
        for name, shape in want.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self._check_shapes()
        self.version += 1

    def logits(self, z: np.ndarray) -> np.ndarray:
        if not self.config.n_classes:
            raise ConfigError("model has no classification head")
        return z @ self.params["W_out"] + self.params["b_out"]


# ---------------------------------------------------------------------------
# neighbourhood sampling
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Hop:
    """Links ``dst`` nodes (one layer) to their sampled neighbours in ``src``."""

    n_dst: int
    n_src: int
    self_idx: np.ndarray
    nbr_idx: np.ndarray
    nbr_dst: np.ndarray
    counts: np.ndarray
    _mats: dict = field(default_factory=dict, repr=False)

    def _mat(self, key):
        if key not in self._mats:
            inv = np.zeros(self.n_dst)
            nz = self.counts > 0
            inv[nz] = 1.0 / self.counts[nz]
            if key == "mean":  # n_dst x n_src
                m = sp.csr_matrix((inv[self.nbr_dst], (self.nbr_dst, self.nbr_idx)), shape=(self.n_dst, self.n_src))
            elif key == "self":  # n_dst x n_src selection
                m = sp.csr_matrix((np.ones(self.n_dst), (np.arange(self.n_dst), self.self_idx)), shape=(self.n_dst, self.n_src))
            else:
                raise KeyError(key)
            self._mats[key] = m
            self._mats[key + "_T"] = m.T.tocsr()
        return self._mats[key]

    def mat(self, key: str, transpose: bool = False):
        m = self._mat(key)
        return self._mats[key + "_T"] if transpose else m

    def neighbor_lists(self, src_ids: np.ndarray) -> list[np.ndarray]:
        starts = np.concatenate([[0], np.cumsum(self.counts)])
        return [src_ids[self.nbr_idx[starts[i] : starts[i + 1]]] for i in range(self.n_dst)]


@dataclass(eq=False)
class Neighborhood:
    """``layers[0]`` is the batch; ``hops[h]`` maps layers[h] onto layers[h+1]."""

    layers: list[np.ndarray]
    hops: list[Hop]

    @property
    def depth(self) -> int:
        return len(self.hops)

    def neighbor_lists(self, h: int) -> list[np.ndarray]:
        return self.hops[h].neighbor_lists(self.layers[h + 1])


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sample_neighborhood(dual: DualGraph, batch: Sequence[int], fanouts: Sequence[int | None], rng=None) -> Neighborhood:
    """Uniform sampling without replacement of ``min(fanout, degree)`` neighbours per hop.

    Neighbours are the union of dual in- and out-neighbours. A fanout of
    ``None`` keeps every neighbour (in sorted order, no randomness used).
    """
    rng = _as_rng(rng)
    layers = [np.asarray(batch, dtype=np.int64)]
    hops = []
    for fanout in fanouts:
        if fanout is not None and fanout < 1:
            raise ConfigError("fanouts must be positive")
        dst = layers[-1]
        src_pos = {int(n): i for i, n in enumerate(dst)}
        src = list(int(n) for n in dst)
        nbr_idx: list[int] = []
        nbr_dst: list[int] = []
        counts = np.zeros(len(dst), dtype=np.int64)
        for i, node in enumerate(dst):
            nb = dual.neighbors[int(node)]
            if fanout is not None and len(nb) > fanout:
                nb = rng.choice(nb, size=fanout, replace=False)
            counts[i] = len(nb)
            for n in nb:
                n = int(n)
                j = src_pos.get(n)
                if j is None:
                    j = src_pos[n] = len(src)
                    src.append(n)
                nbr_idx.append(j)
                nbr_dst.append(i)
        hops.append(
            Hop(
                n_dst=len(dst),
                n_src=len(src),
                self_idx=np.arange(len(dst), dtype=np.int64),
                nbr_idx=np.asarray(nbr_idx, dtype=np.int64),
                nbr_dst=np.asarray(nbr_dst, dtype=np.int64),
                counts=counts,
            )
        )
        layers.append(np.asarray(src, dtype=np.int64))
    return Neighborhood(layers, hops)


# ---------------------------------------------------------------------------
# aggregation, forward, backward
# ---------------------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def aggregate(neighbor_vectors, aggregator: str = "mean", pool_W=None, pool_b=None, dim: int | None = None) -> np.ndarray:
    """Aggregate one node's neighbour vectors; the empty set gives the zero vector."""
    h = np.asarray(neighbor_vectors, dtype=np.float64)
    if h.size == 0:
        if dim is None:
            if pool_W is not None:
                dim = pool_W.shape[1]
            else:
                raise DimensionMismatchError("dimension needed to aggregate an empty neighbour set")
        return np.zeros(dim)
    if h.ndim != 2:
        raise DimensionMismatchError("neighbour vectors must form a 2-D array")
    if aggregator == "mean":
        return h.mean(axis=0)
    if aggregator == "mean_pool":
        if pool_W is None or h.shape[1] != pool_W.shape[0]:
            raise DimensionMismatchError("pooling weights do not match neighbour dimension")
        return relu(h @ pool_W + (0.0 if pool_b is None else pool_b)).mean(axis=0)
    raise ConfigError(f"unknown aggregator {aggregator!r}")


@dataclass(eq=False)
class ForwardCache:
    version: int
    layers: list[dict]
    nb: Neighborhood


def forward(model: SageModel, features: np.ndarray, nb: Neighborhood, train: bool = False, rng=None):
    """Embeddings of ``nb.layers[0]`` and the cache needed by :func:`backward`.

    ``features`` holds every dual node's input vector, indexed by node position.
    """
    cfg = model.config
    if nb.depth != cfg.K:
        raise ShapeError(f"neighbourhood depth {nb.depth} != K={cfg.K}")
    if features.ndim != 2 or features.shape[1] != cfg.input_dim:
        raise ShapeError(f"features have shape {features.shape}, model expects width {cfg.input_dim}")
    drop = train and cfg.dropout > 0.0
    if drop:
        rng = _as_rng(rng)
    p = model.params
    H = features[nb.layers[cfg.K]]
    caches = []
    for k in range(1, cfg.K + 1):
        hop = nb.hops[cfg.K - k]
        mask = None
        if drop:
            mask = (rng.random(H.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
            H = H * mask
        c = {"Hd": H, "mask": mask, "hop": hop}
        if cfg.aggregator == "mean":
            agg = hop.mat("mean") @ H
        else:
            # the pooling transform depends only on the neighbour, so run it once per src node
            pre = H @ p[f"pool_W{k}"] + p[f"pool_b{k}"]
            c["pre"] = pre
            agg = hop.mat("mean") @ relu(pre)
        inp = np.hstack([H[hop.self_idx], agg]) if cfg.self_concat else agg
        Z = inp @ p[f"W{k}"] + p[f"b{k}"]
        c["inp"] = inp
        c["Z"] = Z
        if k < cfg.K and cfg.hidden_activation == "relu":
            H = relu(Z)
        else:
            H = Z
        caches.append(c)
    return H, ForwardCache(model.version, caches, nb)


def backward(model: SageModel, cache: ForwardCache, d_embedding: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given dLoss/d(embedding) for the batch rows."""
    if cache.version != model.version:
        raise StaleCacheError("forward cache predates the current parameters")
    cfg = model.config
    p = model.params
    grads = {name: np.zeros_like(v) for name, v in p.items()}
    G = np.asarray(d_embedding, dtype=np.float64)
    for k in range(cfg.K, 0, -1):
        c = cache.layers[k - 1]
        hop: Hop = c["hop"]
        if G.shape != c["Z"].shape:
            raise ShapeError(f"gradient shape {G.shape} != layer output {c['Z'].shape}")
        if k < cfg.K and cfg.hidden_activation == "relu":
            G = G * (c["Z"] > 0)
        grads[f"W{k}"] = c["inp"].T @ G
        grads[f"b{k}"] = G.sum(axis=0)
        d_inp = G @ p[f"W{k}"].T
        d_in = c["Hd"].shape[1]
        d_agg = d_inp[:, d_in:] if cfg.self_concat else d_inp
        if cfg.aggregator == "mean_pool":
            d_pre = (hop.mat("mean", transpose=True) @ d_agg) * (c["pre"] > 0)
            grads[f"pool_W{k}"] = c["Hd"].T @ d_pre
            grads[f"pool_b{k}"] = d_pre.sum(axis=0)
        if k == 1:
            break
        # gradient flowing into the previous layer's output
        if cfg.self_concat:
            dH = hop.mat("self", transpose=True) @ d_inp[:, :d_in]
        else:
            dH = np.zeros_like(c["Hd"])
        if cfg.aggregator == "mean":
            dH = dH + hop.mat("mean", transpose=True) @ d_agg
        else:
            dH = dH + d_pre @ p[f"pool_W{k}"].T
        if c["mask"] is not None:
            dH = dH * c["mask"]
        G = dH
    return grads


def head_backward(model: SageModel, z: np.ndarray, d_logits: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of the classification head and dLoss/dz."""
    W = model.params["W_out"]
    return {"W_out": z.T @ d_logits, "b_out": d_logits.sum(axis=0)}, d_logits @ W.T


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def supervised_loss(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError("one label per logit row required")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelError(f"labels must lie in 0..{c - 1}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def unsupervised_loss(z_u: np.ndarray, z_pos: np.ndarray, z_negs: np.ndarray, Q: int | None = None):
    """Skip-gram style loss ``-log s(u.v) - Q * mean_n log s(-u.n)``, averaged over the batch.

    ``z_negs`` is either ``(Q, d)`` (negatives shared by the batch) or
    ``(B, Q, d)``. Returns ``(loss, d_u, d_pos, d_negs)``.
    """
    z_u = np.atleast_2d(np.asarray(z_u, dtype=np.float64))
    z_pos = np.atleast_2d(np.asarray(z_pos, dtype=np.float64))
    z_negs = np.asarray(z_negs, dtype=np.float64)
    shared = z_negs.ndim == 2
    q = z_negs.shape[0] if shared else z_negs.shape[1]
    if Q is not None and Q != q:
        raise DimensionMismatchError(f"Q={Q} but {q} negatives supplied")
    if q < 1:
        raise DimensionMismatchError("need at least one negative sample")
    if z_u.shape != z_pos.shape or z_negs.shape[-1] != z_u.shape[1]:
        raise DimensionMismatchError("embedding dimensions differ")
    B = z_u.shape[0]
    pos = np.einsum("bd,bd->b", z_u, z_pos)
    neg = z_u @ z_negs.T if shared else np.einsum("bd,bqd->bq", z_u, z_negs)
    # -log s(x) = log(1 + e^-x); Q * mean over q negatives = sum
    loss = (np.logaddexp(0.0, -pos).sum() + np.logaddexp(0.0, neg).sum()) / B
    g_pos = -_sigmoid(-pos) / B
    g_neg = _sigmoid(neg) / B
    d_pos = g_pos[:, None] * z_u
    if shared:
        d_u = g_pos[:, None] * z_pos + g_neg @ z_negs
        d_negs = g_neg.T @ z_u
    else:
        d_u = g_pos[:, None] * z_pos + np.einsum("bq,bqd->bd", g_neg, z_negs)
        d_negs = g_neg[:, :, None] * z_u[:, None, :]
    return float(loss), d_u, d_pos, d_negs


def random_walk_pairs(dual: DualGraph, walks_per_node: int = 5, walk_length: int = 3, window: int = 2, rng=None) -> np.ndarray:
    """Co-occurrence pairs from uniform random walks over the bidirectional dual graph.

    A walk visits ``walk_length`` nodes (start included); every pair of
    distinct nodes at most ``window`` steps apart is emitted once per walk.
    """
    rng = _as_rng(rng)
    pairs = []
    for start in range(dual.n_nodes):
        for _ in range(walks_per_node):
            walk = [start]
            cur = start
            for _ in range(walk_length - 1):
                nb = dual.neighbors[cur]
                if len(nb) == 0:
                    break
                cur = int(nb[rng.integers(len(nb))])
                walk.append(cur)
            for i in range(len(walk)):
                for j in range(i + 1, min(i + window + 1, len(walk))):
                    if walk[i] != walk[j]:
                        pairs.append((walk[i], walk[j]))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState) -> dict[str, np.ndarray]:
    """In-place Adam update with bias correction and decoupled weight decay."""
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            raise ShapeError(f"gradient {name!r} does not match a parameter")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    shrink = 1.0 - state.learning_rate * state.weight_decay
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        w = params[name]
        m = state.m.setdefault(name, np.zeros_like(w))
        v = state.v.setdefault(name, np.zeros_like(w))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if shrink != 1.0:
            w *= shrink
        w -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def apply_update(model: SageModel, grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    adam_step(model.params, grads, state)
    model.version += 1


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def model_to_dict(model: SageModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "params": {
            name: {"shape": list(arr.shape), "data": [float(x).hex() for x in arr.ravel()]}
            for name, arr in sorted(model.params.items())
        },
    }


def model_from_dict(d: dict) -> SageModel:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"unsupported checkpoint format {d.get('format')!r}")
    cfg = SageConfig.from_dict(d["config"])
    params = {
        name: np.array([float.fromhex(x) for x in rec["data"]], dtype=np.float64).reshape(rec["shape"])
        for name, rec in d["params"].items()
    }
    return SageModel(cfg, params)


def save_model(model: SageModel, path, extra: dict | None = None) -> None:
    doc = model_to_dict(model)
    if extra:
        doc["extra"] = extra
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_model(path) -> tuple[SageModel, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return model_from_dict(doc), doc.get("extra", {})
