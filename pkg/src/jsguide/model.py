"""Gradient-boosted decision trees with logistic loss.

Each boosting round fits one binary regression tree to the first and
second order gradients of the (class-weighted) log loss. Split search is
exact greedy: every midpoint between consecutive distinct feature values
present at a node is a candidate, and the candidate with the largest

    gain = 1/2 * [GL^2/(HL+lambda) + GR^2/(HR+lambda) - G^2/(H+lambda)]

wins. Gains within ``GAIN_RTOL`` of the best are treated as tied and the
tie goes to the lowest feature index, then the lowest threshold. Leaf
values are ``-learning_rate * G/(H+lambda)``. A row goes left when
``x[feature] < threshold``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MODEL_FORMAT = "jsguide-model"
MODEL_VERSION = 1
GAIN_RTOL = 1e-10
_MIN_HESS = 1e-16


class ModelError(ValueError):
    pass


def sigmoid(z):
    with np.errstate(over="ignore"):  # exp overflow saturates to 0 correctly
        return 1.0 / (1.0 + np.exp(-z))


@dataclass
class TrainParams:
    num_trees: int = 200
    max_depth: int = 6
    learning_rate: float = 0.1
    min_child_cover: float = 1.0
    reg_lambda: float = 1.0
    pos_weight: float | None = None  # None: #neg / #pos of the training data
    rng_seed: int = 0
    subsample: float = 1.0
    colsample: float = 1.0

    def validate(self) -> None:
        if self.num_trees < 0 or self.max_depth < 0:
            raise ModelError("num_trees and max_depth must be non-negative")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ModelError("learning_rate must be in (0, 1]")
        if self.min_child_cover < 0 or self.reg_lambda < 0:
            raise ModelError("min_child_cover and reg_lambda must be non-negative")
        if self.pos_weight is not None and self.pos_weight <= 0:
            raise ModelError("pos_weight must be positive")
        if not (0.0 < self.subsample <= 1.0 and 0.0 < self.colsample <= 1.0):
            raise ModelError("subsample and colsample must be in (0, 1]")


@dataclass
class Tree:
    """Flat preorder node table; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray
    gain: np.ndarray
    default_left: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            active = self.feature[node] >= 0
            if not active.any():
                return self.value[node]
            r, n = rows[active], node[active]
            go_left = X[r, self.feature[n]] < self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])

    def leaf_for(self, x) -> int:
        f, t, lo, hi, _ = self._lists()
        node = 0
        while f[node] >= 0:
            node = lo[node] if x[f[node]] < t[node] else hi[node]
        return node

    def _lists(self):
        # plain-list copy for single-row walks; trees are never mutated after fit
        cache = self.__dict__.get("_cache")
        if cache is None:
            cache = (self.feature.tolist(), self.threshold.tolist(), self.left.tolist(),
                     self.right.tolist(), self.value.tolist())
            self.__dict__["_cache"] = cache
        return cache

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "cover": self.cover.tolist(),
            "gain": self.gain.tolist(),
            "default_left": self.default_left.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64),
            cover=np.asarray(d["cover"], dtype=np.float64),
            gain=np.asarray(d["gain"], dtype=np.float64),
            default_left=np.asarray(d["default_left"], dtype=bool),
        )


@dataclass
class GbdtModel:
    trees: list[Tree]
    base_score: float
    learning_rate: float
    pos_weight: float
    feature_ids: list[str]
    fingerprint: str = ""
    n_static: int = 0
    params: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return len(self.feature_ids)

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ModelError(f"vector length {X.shape[1]} != model width {self.n_features}")
        if not np.all(np.isfinite(X)):
            raise ModelError("non-finite feature values")
        return X

    def predict_margin(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        if X.shape[0] == 1:
            x = X[0].tolist()
            total = self.base_score
            for tree in self.trees:
                total += tree._lists()[4][tree.leaf_for(x)]
            return np.array([total])
        margin = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            margin += tree.predict(X)
        return margin

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return sigmoid(self.predict_margin(X))


def sample_weights(y: np.ndarray, pos_weight: float) -> np.ndarray:
    return np.where(np.asarray(y) == 1, float(pos_weight), 1.0)


class _SplitFinder:
    """Exact greedy split search over per-feature distinct values."""

    def __init__(self, X: np.ndarray):
        n, d = X.shape
        self.X = X
        self.values = []
        codes = np.empty((n, d), dtype=np.int64)
        offsets = np.zeros(d + 1, dtype=np.int64)
        for j in range(d):
            uniq, inv = np.unique(X[:, j], return_inverse=True)
            self.values.append(uniq)
            codes[:, j] = inv
            offsets[j + 1] = offsets[j] + len(uniq)
        self.flat_codes = codes + offsets[:-1]
        self.bin_feature = np.repeat(np.arange(d), np.diff(offsets))
        self.bin_value = np.concatenate(self.values) if d else np.zeros(0)
        self.n_bins = int(offsets[-1])

    def best_split(self, rows, g, h, G, H, lam, min_cover, features=None):
        """Return (gain, feature, threshold) or None when nothing has gain > 0."""
        m = len(rows)
        flat = self.flat_codes[rows]
        if features is not None:
            flat = flat[:, features]
        k = flat.shape[1]
        if k == 0:
            return None
        idx_flat = flat.ravel()
        Gb = np.bincount(idx_flat, weights=np.repeat(g[rows], k), minlength=self.n_bins)
        Hb = np.bincount(idx_flat, weights=np.repeat(h[rows], k), minlength=self.n_bins)
        Cb = np.bincount(idx_flat, minlength=self.n_bins)
        present = np.nonzero(Cb)[0]
        feat = self.bin_feature[present]
        nxt_same = feat[:-1] == feat[1:]
        if not nxt_same.any():
            return None
        # cumulative sums restarted at every feature boundary
        starts = np.ones(len(present), dtype=bool)
        starts[1:] = ~nxt_same
        seg_id = np.cumsum(starts) - 1
        csG, csH = np.cumsum(Gb[present]), np.cumsum(Hb[present])
        first = np.nonzero(starts)[0]
        GL = csG - (csG[first] - Gb[present][first])[seg_id]
        HL = csH - (csH[first] - Hb[present][first])[seg_id]
        cand = np.nonzero(nxt_same)[0]
        GL, HL = GL[cand], HL[cand]
        GR, HR = G - GL, H - HL
        ok = (HL >= min_cover) & (HR >= min_cover)
        if not ok.any():
            return None
        parent = G * G / (H + lam)
        gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent)
        gain = np.where(ok, gain, -np.inf)
        best = gain.max()
        tol = GAIN_RTOL * max(1.0, abs(best))
        if not best > tol:
            return None
        pick = int(np.nonzero(gain >= best - tol)[0][0])
        c = cand[pick]
        f = int(feat[c])
        thr = 0.5 * (self.bin_value[present[c]] + self.bin_value[present[c + 1]])
        return float(gain[pick]), f, float(thr)


def _build_tree(finder, rows, g, h, params, features, lr) -> Tree:
    nodes: list[list] = []  # feature, threshold, left, right, value, cover, gain

    def grow(rows, depth):
        G, H = float(g[rows].sum()), float(h[rows].sum())
        me = len(nodes)
        nodes.append([-1, 0.0, -1, -1, -lr * G / (H + params.reg_lambda), H, 0.0])
        if depth >= params.max_depth or len(rows) < 2:
            return me
        split = finder.best_split(rows, g, h, G, H, params.reg_lambda, params.min_child_cover,
                                  features)
        if split is None:
            return me
        gain, f, thr = split
        go_left = finder.X[rows, f] < thr
        nodes[me][0], nodes[me][1], nodes[me][6] = f, thr, gain
        nodes[me][2] = grow(rows[go_left], depth + 1)
        nodes[me][3] = grow(rows[~go_left], depth + 1)
        return me

    grow(rows, 0)
    cols = list(zip(*nodes))
    feature = np.asarray(cols[0], dtype=np.int64)
    return Tree(
        feature=feature,
        threshold=np.asarray(cols[1], dtype=np.float64),
        left=np.asarray(cols[2], dtype=np.int64),
        right=np.asarray(cols[3], dtype=np.int64),
        value=np.asarray(cols[4], dtype=np.float64),
        cover=np.asarray(cols[5], dtype=np.float64),
        gain=np.asarray(cols[6], dtype=np.float64),
        default_left=np.ones(len(feature), dtype=bool),
    )


def fit(
    X: np.ndarray,
    y: np.ndarray,
    params: TrainParams | None = None,
    feature_ids: Sequence[str] | None = None,
    fingerprint: str = "",
    n_static: int = 0,
) -> GbdtModel:
    """Train on a dense matrix ``X`` and 0/1 labels ``y``."""
    params = params or TrainParams()
    params.validate()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ModelError("empty training set")
    if X.shape[0] != len(y):
        raise ModelError("X and y have different lengths")
    if not np.all(np.isfinite(X)):
        raise ModelError("non-finite feature values in training data")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ModelError("training data must contain both classes")
    pos_weight = params.pos_weight if params.pos_weight is not None else n_neg / n_pos
    w = sample_weights(y, pos_weight)
    p0 = float((w * y).sum() / w.sum())
    base = math.log(p0 / (1.0 - p0))

    rng = np.random.default_rng(params.rng_seed)
    finder = _SplitFinder(X)
    n, d = X.shape
    margin = np.full(n, base)
    trees = []
    for _ in range(params.num_trees):
        p = sigmoid(margin)
        g = (p - y) * w
        h = np.maximum(p * (1.0 - p), _MIN_HESS) * w
        rows = np.arange(n)
        if params.subsample < 1.0:
            rows = np.sort(rng.choice(n, size=max(1, int(round(params.subsample * n))), replace=False))
        features = None
        if params.colsample < 1.0:
            features = np.sort(rng.choice(d, size=max(1, int(round(params.colsample * d))),
                                          replace=False))
        tree = _build_tree(finder, rows, g, h, params, features, params.learning_rate)
        trees.append(tree)
        margin += tree.predict(X)

    snapshot = asdict(params)
    snapshot["pos_weight"] = pos_weight
    return GbdtModel(
        trees=trees,
        base_score=base,
        learning_rate=params.learning_rate,
        pos_weight=pos_weight,
        feature_ids=list(feature_ids) if feature_ids is not None else [f"f{i}" for i in range(d)],
        fingerprint=fingerprint,
        n_static=n_static,
        params=snapshot,
    )


def train(dataset, params: TrainParams | None = None) -> GbdtModel:
    """Train on a :class:`~jsguide.vectorize.Dataset`."""
    if len(dataset) == 0:
        raise ModelError("empty dataset")
    return fit(dataset.X, dataset.y, params, dataset.feature_ids, dataset.fingerprint,
               dataset.n_static)


def predict_score(model: GbdtModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ModelError("predict_score takes a single vector")
    return float(model.predict_proba(x)[0])


def classify(model: GbdtModel, x, threshold: float = 0.5) -> int:
    """1 (positive) iff the score reaches ``threshold``."""
    return int(predict_score(model, x) >= threshold)


@dataclass
class ImportanceTable:
    feature_ids: list[str]
    gain: np.ndarray

    def ranked(self) -> list[str]:
        """Ids by descending gain, ties by column index."""
        order = sorted(range(len(self.gain)), key=lambda i: (-self.gain[i], i))
        return [self.feature_ids[i] for i in order]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.feature_ids, map(float, self.gain)))


def feature_importance(model: GbdtModel) -> ImportanceTable:
    """Total split gain per feature over all trees."""
    gain = np.zeros(model.n_features)
    for tree in model.trees:
        internal = tree.feature >= 0
        np.add.at(gain, tree.feature[internal], tree.gain[internal])
    return ImportanceTable(list(model.feature_ids), gain)


def select_top_fraction(table: ImportanceTable, fraction: float) -> list[str]:
    """The ``ceil(fraction * N)`` highest-gain ids, best first."""
    if not 0.0 < fraction <= 1.0:
        raise ModelError("fraction must be in (0, 1]")
    n = len(table.feature_ids)
    if n == 0:
        raise ModelError("empty importance table")
    k = min(n, math.ceil(fraction * n - 1e-9))
    return table.ranked()[:k]


def mean_rank_importance(tables: Sequence[ImportanceTable]) -> list[tuple[str, float]]:
    """Average per-table rank (1 = highest gain, ties share the mean rank).

    Returned ascending by mean rank, ties broken by column index.
    """
    from scipy.stats import rankdata

    if not tables:
        raise ModelError("no importance tables")
    ids = tables[0].feature_ids
    for t in tables[1:]:
        if t.feature_ids != ids:
            raise ModelError("importance tables cover different catalogs")
    ranks = np.mean([rankdata(-t.gain, method="average") for t in tables], axis=0)
    order = sorted(range(len(ids)), key=lambda i: (ranks[i], i))
    return [(ids[i], float(ranks[i])) for i in order]


def model_to_dict(model: GbdtModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "catalog": model.fingerprint,
        "feature_ids": list(model.feature_ids),
        "n_static": model.n_static,
        "params": model.params,
        "base_score": model.base_score,
        "learning_rate": model.learning_rate,
        "pos_weight": model.pos_weight,
        "trees": [t.to_dict() for t in model.trees],
    }


def model_from_dict(data: dict) -> GbdtModel:
    if not isinstance(data, dict) or data.get("format") != MODEL_FORMAT:
        raise ModelError("not a model file")
    if data.get("version") != MODEL_VERSION:
        raise ModelError(f"unsupported model version {data.get('version')!r}")
    try:
        return GbdtModel(
            trees=[Tree.from_dict(t) for t in data["trees"]],
            base_score=float(data["base_score"]),
            learning_rate=float(data["learning_rate"]),
            pos_weight=float(data["pos_weight"]),
            feature_ids=list(data["feature_ids"]),
            fingerprint=data["catalog"],
            n_static=int(data["n_static"]),
            params=dict(data["params"]),
        )
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed model file: {exc}") from None


def dumps_model(model: GbdtModel) -> str:
    return json.dumps(model_to_dict(model), sort_keys=True)


def save_model(model: GbdtModel, path: str | Path) -> None:
    Path(path).write_text(dumps_model(model) + "\n", encoding="utf-8")


def load_model(path: str | Path, catalog=None) -> GbdtModel:
    """Load a model; with ``catalog`` given, its fingerprint must match."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: corrupted model file: {exc}") from None
    model = model_from_dict(data)
    if catalog is not None and catalog.fingerprint() != model.fingerprint:
        raise ModelError(
            f"model was trained for catalog {model.fingerprint}, got {catalog.fingerprint()}"
        )
    return model
