"""Dataset variants, splits, training loops, voting and scoring.

Three variants are built from one original road network (ORN):

``orn``       dual of the ORN, graph attributes only
``srn``       dual of the segmented network, graph attributes only
``srn+vis``   as ``srn`` plus one 32-bin histogram per raster channel

Splits are drawn on ORN edges and inherited by their SRN children, so every
variant is scored on the same ORN test edges. SRN predictions are mapped
back onto ORN edges by majority vote before scoring.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import ConfigError, DataError, EmptyGroupError, LabelError, NumericError, SplitError
from .features import FeatureSpec, Normalizer, assemble_features
from .graph import HIGHWAY_CLASSES, DualGraph, RoadGraph, to_dual
from .raster import Channel, edge_histograms
from .sage import (
    Neighborhood,
    OptimizerState,
    SageConfig,
    SageModel,
    apply_update,
    backward,
    forward,
    head_backward,
    random_walk_pairs,
    sample_neighborhood,
    supervised_loss,
    unsupervised_loss,
)
from .segmentation import SegmentationConfig, segment_pipeline

log = logging.getLogger(__name__)

VARIANTS = ("orn", "srn", "srn+vis")
VARIANT_LABELS = {"orn": "ORN", "srn": "SRN", "srn+vis": "SRN+Vis"}
TRAIN, VAL, TEST = "train", "val", "test"
N_CLASSES = len(HIGHWAY_CLASSES)
# first four classes (motorway..secondary) -> 0, the rest -> 1
BINARY_OF = {c: (0 if i < 4 else 1) for i, c in enumerate(HIGHWAY_CLASSES)}


# ---------------------------------------------------------------------------
# taxonomy and metrics
# ---------------------------------------------------------------------------


def class_index(label: str | None) -> int:
    if label is None:
        return -1
    try:
        return HIGHWAY_CLASSES.index(label)
    except ValueError:
        return -1


def aggregate_binary(pred8):
    """Map 8-class predictions (labels or indices) to the two-class partition."""
    scalar = isinstance(pred8, (str, int, np.integer))
    items = [pred8] if scalar else list(pred8)
    out = []
    for p in items:
        if isinstance(p, str):
            if p not in BINARY_OF:
                raise LabelError(f"unknown road class {p!r}")
            out.append(BINARY_OF[p])
        else:
            p = int(p)
            if not 0 <= p < N_CLASSES:
                raise LabelError(f"class index {p} out of range")
            out.append(0 if p < 4 else 1)
    return out[0] if scalar else np.asarray(out, dtype=np.int64)


def micro_f1(predictions, labels) -> float:
    """Micro-averaged F1 with TP/FP/FN pooled over all classes."""
    pred = np.asarray(predictions)
    true = np.asarray(labels)
    if pred.shape != true.shape:
        raise ValueError("predictions and labels differ in length")
    if pred.size == 0:
        raise ValueError("micro-F1 of an empty set is undefined")
    tp = fp = fn = 0
    for c in np.union1d(pred, true):
        tp += int(np.sum((pred == c) & (true == c)))
        fp += int(np.sum((pred == c) & (true != c)))
        fn += int(np.sum((pred != c) & (true == c)))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def majority_vote(child_pred: dict[str, int], groups: dict[str, Sequence[str]], child_prob: dict[str, np.ndarray] | None = None) -> dict[str, int]:
    """Modal child class per parent; ties go to the larger summed probability, then the lower index."""
    out = {}
    for parent, children in groups.items():
        if not children:
            raise EmptyGroupError(f"parent {parent!r} has no segments to vote")
        counts = Counter(int(child_pred[c]) for c in children)
        top = max(counts.values())
        tied = sorted(k for k, v in counts.items() if v == top)
        if len(tied) > 1 and child_prob is not None:
            score = {k: sum(float(child_prob[c][k]) for c in children) for k in tied}
            best = max(score.values())
            tied = [k for k in tied if score[k] == best]
        out[parent] = tied[0]
    return out


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass
class SplitAssignment:
    orn: dict[str, str]
    srn: dict[str, str] = field(default_factory=dict)

    def ids(self, which: str, level: str = "orn") -> set[str]:
        table = self.orn if level == "orn" else self.srn
        return {k for k, v in table.items() if v == which}


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_and_propagate(orn: RoadGraph, srn: RoadGraph | None, seed: int, val_frac: float = 0.2, test_frac: float = 0.2) -> SplitAssignment:
    ids = sorted(orn.edges)
    n = len(ids)
    n_val = _round_half_up(val_frac * n)
    n_test = _round_half_up(test_frac * n)
    order = np.random.default_rng(seed).permutation(n)
    orn_split = {}
    for rank, k in enumerate(order):
        orn_split[ids[k]] = VAL if rank < n_val else TEST if rank < n_val + n_test else TRAIN
    srn_split = {}
    if srn is not None:
        for eid, e in srn.edges.items():
            if e.parent_id not in orn_split:
                raise SplitError(f"segment {eid!r} has orphan parent_id {e.parent_id!r}")
            srn_split[eid] = orn_split[e.parent_id]
    return SplitAssignment(orn_split, srn_split)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureConfig:
    geometry_points: int = 5
    footprint_m: float = 120.0
    scale_histograms: bool = False
    gps_presence: bool = False


@dataclass(eq=False)
class VariantData:
    name: str
    graph: RoadGraph
    dual: DualGraph
    X: np.ndarray
    spec: FeatureSpec
    normalizer: Normalizer
    labels: np.ndarray
    split: np.ndarray
    parents: list[str]
    _full_nb: Neighborhood | None = None

    @property
    def ids(self) -> tuple[str, ...]:
        return self.dual.ids

    def nodes(self, which: str) -> np.ndarray:
        return np.flatnonzero(self.split == which)

    def full_neighborhood(self, K: int) -> Neighborhood:
        if self._full_nb is None or self._full_nb.depth != K:
            self._full_nb = sample_neighborhood(self.dual, np.arange(self.dual.n_nodes), [None] * K)
        return self._full_nb


def feature_matrix(graph: RoadGraph, dual: DualGraph, spec: FeatureSpec, channels: list[Channel] | None, footprint_m: float = 120.0) -> np.ndarray:
    rows = []
    for e in dual.road_edges:
        hists = None
        if spec.include_vision:
            hists = edge_histograms(e, channels, footprint_m, footprint_m, spec.bins, spec.geometry_points)
        rows.append(assemble_features(e, spec, hists))
    return np.vstack(rows) if rows else np.zeros((0, spec.dim))


def build_variant(
    name: str,
    graph: RoadGraph,
    split: dict[str, str],
    channels: list[Channel] | None,
    feat: FeatureConfig,
    origin: tuple[float, float],
    normalizer: Normalizer | None = None,
) -> VariantData:
    include_vision = name == "srn+vis"
    if include_vision and not channels:
        raise DataError("the srn+vis variant needs raster channels")
    passthrough = ("flags", "gps_presence") + (() if feat.scale_histograms else ("hist",))
    spec = FeatureSpec(
        geometry_points=feat.geometry_points,
        include_vision=include_vision,
        channels=tuple(c.name for c in channels) if include_vision else FeatureSpec().channels,
        gps_presence=feat.gps_presence,
        origin=origin,
        passthrough=passthrough,
    )
    dual = to_dual(graph)
    raw = feature_matrix(graph, dual, spec, channels, feat.footprint_m)
    split_arr = np.array([split[eid] for eid in dual.ids])
    if normalizer is None:
        train = raw[split_arr == TRAIN]
        if train.shape[0] == 0:
            raise SplitError("no training nodes to fit the normaliser on")
        normalizer = Normalizer.fit(train, spec.passthrough_mask())
    norm = normalizer
    labels = np.array([class_index(e.highway) for e in dual.road_edges], dtype=np.int64)
    parents = [e.parent_id for e in dual.road_edges]
    return VariantData(name, graph, dual, norm.apply(raw), spec, norm, labels, split_arr, parents)


def prepare_datasets(
    orn: RoadGraph,
    channels: list[Channel] | None,
    split_seed: int,
    seg: SegmentationConfig | None = None,
    feat: FeatureConfig | None = None,
    variants: Sequence[str] = VARIANTS,
) -> tuple[dict[str, VariantData], SplitAssignment]:
    seg = seg or SegmentationConfig()
    feat = feat or FeatureConfig()
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; expected one of {VARIANTS}")
    srn = segment_pipeline(orn, seg) if any(v != "orn" for v in variants) else None
    split = split_and_propagate(orn, srn, split_seed)
    origin = orn.bbox_center()
    out = {}
    for v in variants:
        if v == "orn":
            out[v] = build_variant(v, orn, split.orn, None, feat, origin)
        else:
            out[v] = build_variant(v, srn, split.srn, channels, feat, origin)
    return out, split


# ---------------------------------------------------------------------------
# supervised training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 512
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class TrainRecord:
    val_f1: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_f1: float = -1.0
    batches: int = 0


def predict_proba(model: SageModel, data: VariantData) -> np.ndarray:
    nb = data.full_neighborhood(model.config.K)
    z, _ = forward(model, data.X, nb)
    logits = model.logits(z)
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def embed(model: SageModel, data: VariantData) -> np.ndarray:
    z, _ = forward(model, data.X, data.full_neighborhood(model.config.K))
    return z


def _check_batch(data: VariantData, batch: np.ndarray) -> None:
    if np.any(data.split[batch] != TRAIN) or np.any(data.labels[batch] < 0):
        raise SplitError("non-training node found in a supervised training batch")


def train_supervised(
    data: VariantData,
    sage: SageConfig,
    train: TrainConfig | None = None,
    batch_observer: Callable[[list[str]], None] | None = None,
) -> tuple[SageModel, TrainRecord]:
    """Minibatch training on labelled train nodes; returns the best-validation snapshot."""
    train = train or TrainConfig()
    if sage.n_classes != N_CLASSES:
        sage = replace(sage, n_classes=N_CLASSES)
    if sage.input_dim != data.X.shape[1]:
        sage = replace(sage, input_dim=data.X.shape[1])
    tr = data.nodes(TRAIN)
    tr = tr[data.labels[tr] >= 0]
    if tr.size == 0:
        raise DataError("no labelled training nodes")
    val = data.nodes(VAL)
    val = val[data.labels[val] >= 0]

    rng = np.random.default_rng(train.seed)
    model = SageModel(sage)
    opt = OptimizerState(train.learning_rate, train.weight_decay)
    rec = TrainRecord()
    best = model.copy_params()
    for epoch in range(train.epochs):
        order = rng.permutation(tr)
        losses = []
        for s in range(0, order.size, train.batch_size):
            batch = order[s : s + train.batch_size]
            _check_batch(data, batch)
            if batch_observer is not None:
                batch_observer([data.ids[i] for i in batch])
            nb = sample_neighborhood(data.dual, batch, sage.fanouts, rng)
            z, cache = forward(model, data.X, nb, train=True, rng=rng)
            loss, d_logits = supervised_loss(model.logits(z), data.labels[batch])
            if not math.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            head_grads, dz = head_backward(model, z, d_logits)
            grads = backward(model, cache, dz)
            grads.update(head_grads)
            apply_update(model, grads, opt)
            losses.append(loss)
            rec.batches += 1
        rec.train_loss.append(float(np.mean(losses)))
        score = micro_f1(predict_proba(model, data)[val].argmax(axis=1), data.labels[val]) if val.size else 0.0
        rec.val_f1.append(score)
        if score > rec.best_val_f1:
            rec.best_val_f1, rec.best_epoch = score, epoch
            best = model.copy_params()
    model.load_params(best)
    return model, rec


# ---------------------------------------------------------------------------
# unsupervised training and the downstream classifier
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UnsupervisedConfig:
    epochs: int = 20
    batch_size: int = 1024
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    negatives: int = 5
    walks_per_node: int = 5
    walk_length: int = 3
    window: int = 2
    seed: int = 0


def train_unsupervised(data: VariantData, sage: SageConfig, cfg: UnsupervisedConfig | None = None) -> tuple[SageModel, np.ndarray, list[float]]:
    """Optimise the random-walk co-occurrence loss over all nodes; labels are never read."""
    cfg = cfg or UnsupervisedConfig()
    sage = replace(sage, n_classes=0, input_dim=data.X.shape[1])
    rng = np.random.default_rng(cfg.seed)
    model = SageModel(sage)
    opt = OptimizerState(cfg.learning_rate, cfg.weight_decay)
    pairs = random_walk_pairs(data.dual, cfg.walks_per_node, cfg.walk_length, cfg.window, rng)
    n = data.dual.n_nodes
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for s in range(0, order.size, cfg.batch_size):
            bp = pairs[order[s : s + cfg.batch_size]]
            negs = rng.integers(0, n, size=cfg.negatives)
            batch, inv = np.unique(np.concatenate([bp[:, 0], bp[:, 1], negs]), return_inverse=True)
            B = len(bp)
            iu, iv, ineg = inv[:B], inv[B : 2 * B], inv[2 * B :]
            nb = sample_neighborhood(data.dual, batch, sage.fanouts, rng)
            z, cache = forward(model, data.X, nb, train=True, rng=rng)
            loss, du, dv, dneg = unsupervised_loss(z[iu], z[iv], z[ineg], cfg.negatives)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite unsupervised loss at epoch {epoch}")
            dz = np.zeros_like(z)
            np.add.at(dz, iu, du)
            np.add.at(dz, iv, dv)
            np.add.at(dz, ineg, dneg)
            apply_update(model, backward(model, cache, dz), opt)
            losses.append(loss)
        history.append(float(np.mean(losses)) if losses else 0.0)
    return model, embed(model, data), history


@dataclass
class LogisticClassifier:
    classes: np.ndarray
    W: np.ndarray
    b: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def proba(self, X: np.ndarray) -> np.ndarray:
        """Probabilities over all 8 classes (zero for classes unseen in training)."""
        Xs = (X - self.mean) / self.std
        logits = Xs @ self.W + self.b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        full = np.zeros((X.shape[0], N_CLASSES))
        full[:, self.classes] = p
        return full

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.proba(X).argmax(axis=1)

    def to_dict(self) -> dict:
        def hexed(a):
            return {"shape": list(a.shape), "data": [float(x).hex() for x in np.ravel(a)]}

        return {"classes": self.classes.tolist(), **{k: hexed(getattr(self, k)) for k in ("W", "b", "mean", "std")}}

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticClassifier":
        def unhex(rec):
            return np.array([float.fromhex(x) for x in rec["data"]]).reshape(rec["shape"])

        return cls(np.array(d["classes"], dtype=np.int64), *(unhex(d[k]) for k in ("W", "b", "mean", "std")))


def fit_downstream_classifier(embeddings: np.ndarray, labels: np.ndarray, split: np.ndarray, l2: float = 1e-3):
    """Multinomial logistic regression on train embeddings; returns (classifier, predictions, probabilities)."""
    tr = np.flatnonzero((split == TRAIN) & (labels >= 0))
    if tr.size == 0:
        raise DataError("no labelled training embeddings")
    X = embeddings[tr]
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    Xs = (X - mean) / std
    classes = np.unique(labels[tr])
    missing = sorted(set(range(N_CLASSES)) - set(classes.tolist()))
    if missing:
        log.warning("classes absent from training data will never be predicted: %s", [HIGHWAY_CLASSES[m] for m in missing])
    y = np.searchsorted(classes, labels[tr])
    n, d = Xs.shape
    c = len(classes)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0

    def objective(theta):
        W = theta[: d * c].reshape(d, c)
        b = theta[d * c :]
        logits = Xs @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(logits).sum(axis=1, keepdims=True))
        logp = logits - logz
        loss = -(onehot * logp).sum() / n + 0.5 * l2 * (W * W).sum()
        g = (np.exp(logp) - onehot) / n
        return loss, np.concatenate([(Xs.T @ g + l2 * W).ravel(), g.sum(axis=0)])

    res = minimize(objective, np.zeros(d * c + c), jac=True, method="L-BFGS-B", options={"maxiter": 500})
    clf = LogisticClassifier(classes, res.x[: d * c].reshape(d, c), res.x[d * c :], mean, std)
    proba = clf.proba(embeddings)
    return clf, proba.argmax(axis=1), proba


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def orn_level_predictions(data: VariantData, proba: np.ndarray, which: str = TEST) -> dict[str, int]:
    """Predictions per ORN edge in ``which``; SRN variants are majority-voted onto their parents."""
    idx = data.nodes(which)
    pred = proba.argmax(axis=1)
    if data.name == "orn":
        return {data.ids[i]: int(pred[i]) for i in idx}
    groups: dict[str, list[str]] = {}
    for i in idx:
        groups.setdefault(data.parents[i], []).append(data.ids[i])
    child_pred = {data.ids[i]: int(pred[i]) for i in idx}
    child_prob = {data.ids[i]: proba[i] for i in idx}
    return majority_vote(child_pred, groups, child_prob)


def score_variant(data: VariantData, proba: np.ndarray, orn_labels: dict[str, int], which: str = TEST) -> dict[str, float]:
    votes = orn_level_predictions(data, proba, which)
    keys = sorted(k for k in votes if orn_labels.get(k, -1) >= 0)
    if not keys:
        raise DataError(f"no labelled ORN edges in the {which} split")
    pred8 = np.array([votes[k] for k in keys])
    true8 = np.array([orn_labels[k] for k in keys])
    idx = data.nodes(which)
    idx = idx[data.labels[idx] >= 0]
    return {
        "f1_8class": micro_f1(pred8, true8),
        "f1_binary": micro_f1(aggregate_binary(pred8), aggregate_binary(true8)),
        "node_f1_8class": micro_f1(proba[idx].argmax(axis=1), data.labels[idx]),
        "n_orn_edges": len(keys),
    }


# ---------------------------------------------------------------------------
# hyperparameter search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HyperparameterSpace:
    hidden_units: tuple[int, ...] = (512, 1024)
    embedding_dim: tuple[int, ...] = (8, 16, 32, 64, 128)
    learning_rate: tuple[float, float] = (1e-8, 1e-1)
    weight_decay: tuple[float, float] = (0.0, 0.1)
    dropout_rate: tuple[float, float] = (0.0, 0.4)

    def sample(self, rng: np.random.Generator) -> dict:
        lo, hi = self.learning_rate
        return {
            "hidden_units": int(rng.choice(self.hidden_units)),
            "embedding_dim": int(rng.choice(self.embedding_dim)),
            "learning_rate": float(math.exp(rng.uniform(math.log(lo), math.log(hi)))),
            "weight_decay": float(rng.uniform(*self.weight_decay)),
            "dropout_rate": float(rng.uniform(*self.dropout_rate)),
        }

    def contains(self, trial: dict) -> bool:
        return (
            trial["hidden_units"] in self.hidden_units
            and trial["embedding_dim"] in self.embedding_dim
            and self.learning_rate[0] <= trial["learning_rate"] <= self.learning_rate[1]
            and self.weight_decay[0] <= trial["weight_decay"] <= self.weight_decay[1]
            and self.dropout_rate[0] <= trial["dropout_rate"] <= self.dropout_rate[1]
        )


def hyperparameter_search(space: HyperparameterSpace, budget: int, seed: int, objective: Callable[[dict], float]) -> tuple[dict, list[dict]]:
    """Seeded random search; ``objective`` maps a sampled configuration to validation micro-F1."""
    if budget < 1:
        raise ConfigError("search budget must be >= 1")
    rng = np.random.default_rng(seed)
    trials = []
    for t in range(budget):
        params = space.sample(rng)
        trials.append({"trial": t, "params": params, "val_f1": float(objective(params))})
    best = max(trials, key=lambda r: (r["val_f1"], -r["trial"]))
    return best, trials


def apply_trial(sage: SageConfig, train: TrainConfig, params: dict) -> tuple[SageConfig, TrainConfig]:
    return (
        replace(sage, hidden_units=params["hidden_units"], embedding_dim=params["embedding_dim"], dropout=params["dropout_rate"]),
        replace(train, learning_rate=params["learning_rate"], weight_decay=params["weight_decay"]),
    )


# ---------------------------------------------------------------------------
# full protocol
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    sage: dict = field(default_factory=lambda: {"hidden_units": 512, "embedding_dim": 64, "aggregator": "mean_pool", "fanouts": [25, 10], "dropout": 0.0})
    supervised: TrainConfig = TrainConfig()
    unsupervised: UnsupervisedConfig = UnsupervisedConfig()
    segmentation: SegmentationConfig = SegmentationConfig()
    features: FeatureConfig = FeatureConfig()
    modes: tuple[str, ...] = ("supervised",)
    variants: tuple[str, ...] = VARIANTS
    search_budget: int = 0
    search_epochs: int | None = None

    def to_dict(self) -> dict:
        return {
            "sage": dict(self.sage),
            "supervised": asdict(self.supervised),
            "unsupervised": asdict(self.unsupervised),
            "segmentation": asdict(self.segmentation),
            "features": asdict(self.features),
            "modes": list(self.modes),
            "variants": list(self.variants),
            "search_budget": self.search_budget,
            "search_epochs": self.search_epochs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {"sage", "supervised", "unsupervised", "segmentation", "features", "modes", "variants", "search_budget", "search_epochs"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        try:
            base = cls()
            sage = dict(base.sage)
            sage.update(d.get("sage", {}))
            return cls(
                sage=sage,
                supervised=TrainConfig(**d.get("supervised", {})),
                unsupervised=UnsupervisedConfig(**d.get("unsupervised", {})),
                segmentation=SegmentationConfig(**d.get("segmentation", {})),
                features=FeatureConfig(**d.get("features", {})),
                modes=tuple(d.get("modes", base.modes)),
                variants=tuple(d.get("variants", base.variants)),
                search_budget=int(d.get("search_budget", 0)),
                search_epochs=d.get("search_epochs"),
            )
        except TypeError as exc:
            raise ConfigError(f"bad experiment config: {exc}") from exc


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def derive_seeds(seed: int) -> dict[str, int]:
    split, model, train, unsup = np.random.SeedSequence(seed).generate_state(4)
    return {"split": int(split), "model": int(model), "train": int(train), "unsupervised": int(unsup)}


def sage_config_for(exp: ExperimentConfig, data: VariantData, seed: int, n_classes: int) -> SageConfig:
    opts = dict(exp.sage)
    opts["fanouts"] = tuple(opts.get("fanouts", (25, 10)))
    return SageConfig(input_dim=data.X.shape[1], n_classes=n_classes, seed=seed, **opts)


def fit_supervised(exp: ExperimentConfig, data: VariantData, seeds: dict[str, int], batch_observer=None):
    """Optional random search, then the final supervised fit. Returns (model, record, trials)."""
    sage = sage_config_for(exp, data, seeds["model"], N_CLASSES)
    train = replace(exp.supervised, seed=seeds["train"])
    trials: list[dict] = []
    if exp.search_budget > 0:
        search_train = train if exp.search_epochs is None else replace(train, epochs=int(exp.search_epochs))

        def objective(params):
            s, t = apply_trial(sage, search_train, params)
            return train_supervised(data, s, t)[1].best_val_f1

        best, trials = hyperparameter_search(HyperparameterSpace(), exp.search_budget, seeds["train"], objective)
        sage, train = apply_trial(sage, train, best["params"])
    model, rec = train_supervised(data, sage, train, batch_observer)
    return model, rec, trials


def fit_unsupervised(exp: ExperimentConfig, data: VariantData, seeds: dict[str, int]):
    """Unsupervised embeddings plus the downstream classifier. Returns (model, classifier, proba, loss history)."""
    sage = sage_config_for(exp, data, seeds["model"], 0)
    ucfg = replace(exp.unsupervised, seed=seeds["unsupervised"])
    model, emb, history = train_unsupervised(data, sage, ucfg)
    clf, _, proba = fit_downstream_classifier(emb, data.labels, data.split)
    return model, clf, proba, history


def run_variant(exp: ExperimentConfig, data: VariantData, orn_labels: dict[str, int], seeds: dict[str, int], mode: str, batch_observer=None, on_model=None) -> dict:
    """Train one variant in one mode and score it on the shared ORN test edges.

    ``on_model(model, classifier)`` is called with the fitted model, e.g. to save it.
    """
    if mode == "supervised":
        model, rec, trials = fit_supervised(exp, data, seeds, batch_observer)
        if on_model is not None:
            on_model(model, None)
        out = score_variant(data, predict_proba(model, data), orn_labels)
        out.update(best_epoch=rec.best_epoch, best_val_f1=rec.best_val_f1, trials=trials)
        return out
    if mode == "unsupervised":
        model, clf, proba, history = fit_unsupervised(exp, data, seeds)
        if on_model is not None:
            on_model(model, clf)
        out = score_variant(data, proba, orn_labels)
        out.update(loss_history=history, val=score_variant(data, proba, orn_labels, VAL))
        return out
    raise ConfigError(f"unknown training mode {mode!r}")


def run_protocol(orn: RoadGraph, channels: list[Channel] | None, exp: ExperimentConfig, seed: int, batch_observer=None, on_model=None) -> dict:
    """All requested variants and modes for one seed.

    ``on_model(seed, mode, variant, data, model, classifier)`` sees every fitted model.
    """
    seeds = derive_seeds(seed)
    datasets, split = prepare_datasets(orn, channels, seeds["split"], exp.segmentation, exp.features, exp.variants)
    orn_labels = {eid: class_index(e.highway) for eid, e in orn.edges.items()}
    table: dict[str, dict] = {}
    for mode in exp.modes:
        table[mode] = {}
        for v in exp.variants:
            hook = None
            if on_model is not None:
                hook = lambda m, c, mode=mode, v=v: on_model(seed, mode, v, datasets[v], m, c)
            table[mode][VARIANT_LABELS[v]] = run_variant(exp, datasets[v], orn_labels, seeds, mode, batch_observer, hook)
    return {
        "seed": seed,
        "derived_seeds": seeds,
        "table": table,
        "n_nodes": {VARIANT_LABELS[v]: datasets[v].dual.n_nodes for v in exp.variants},
        "test_orn_ids": sorted(split.ids(TEST)),
    }


def summarise(per_seed: list[dict], exp: ExperimentConfig) -> dict:
    """Seed-averaged table cells plus percentage gains over ORN."""
    table: dict[str, dict] = {}
    gains: dict[str, dict] = {}
    for mode in exp.modes:
        table[mode] = {}
        for v in exp.variants:
            name = VARIANT_LABELS[v]
            cells = [r["table"][mode][name] for r in per_seed]
            table[mode][name] = {
                "f1_8class": float(np.mean([c["f1_8class"] for c in cells])),
                "f1_binary": float(np.mean([c["f1_binary"] for c in cells])),
            }
        if "orn" in exp.variants:
            base = table[mode]["ORN"]
            gains[mode] = {
                name: {k: 100.0 * (cell[k] - base[k]) / base[k] if base[k] else 0.0 for k in ("f1_8class", "f1_binary")}
                for name, cell in table[mode].items()
                if name != "ORN"
            }
    return {"table": table, "gain_over_orn_pct": gains}


def run_experiment(orn: RoadGraph, channels: list[Channel] | None, exp: ExperimentConfig, seeds: Sequence[int], provenance: dict | None = None, batch_observer=None, on_model=None) -> dict:
    per_seed = [run_protocol(orn, channels, exp, s, batch_observer, on_model) for s in seeds]
    cfg = exp.to_dict()
    results = {
        "format": "roadsage-results/1",
        "config_hash": config_hash({"experiment": cfg, "provenance": provenance or {}}),
        "config": cfg,
        "provenance": provenance or {},
        "seeds": list(seeds),
        **summarise(per_seed, exp),
        "per_seed": per_seed,
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    return results
