"""Histogram gradient-boosted regression trees, per station.

Squared-error boosting: each round fits one tree to the current residuals.
Trees grow leaf-wise (best-first): among all current leaves, the split with
the largest gain is applied until ``max_leaves`` is reached or no split
improves. Split candidates are histogram bin boundaries taken from
training-set quantiles, fixed after round 0. For a leaf holding residual
sum G over n samples, the regularized score is G^2 / (n + l2_lambda), a
split's gain is score(left) + score(right) - score(parent), and the leaf
value is G / (n + l2_lambda). With learning_rate <= 1 this makes training
MSE non-increasing across rounds.

Ties between equal-gain candidates break toward the lower feature index,
then the lower bin boundary; ties between leaves break toward the earliest
created leaf.

Also provides the seasonal-naive baseline (demand one week earlier) that
stands in for manual forecasting, and a versioned text format for model
persistence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from ._docio import DocReader, ModelFormatError, check_header
from .demand import DemandSeries
from .features import FeatureRow, FeatureSchema, rows_to_arrays

__all__ = [
    "ModelFormatError",
    "TrainConfig",
    "Tree",
    "TreeEnsemble",
    "predict",
    "compute_bin_boundaries",
    "fit",
    "seasonal_naive_forecast",
    "save_model",
    "load_model",
    "save_model_file",
    "load_model_file",
]


@dataclass(frozen=True)
class TrainConfig:
    n_rounds: int = 100
    max_leaves: int = 15
    min_samples_leaf: int = 5
    l2_lambda: float = 1.0
    n_bins: int = 64
    learning_rate: float = 0.1
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.n_rounds < 1:
            raise ValueError(f"n_rounds must be >= 1, got {self.n_rounds}")
        if self.max_leaves < 2:
            raise ValueError(f"max_leaves must be >= 2, got {self.max_leaves}")
        if self.min_samples_leaf < 1:
            raise ValueError(f"min_samples_leaf must be >= 1, got {self.min_samples_leaf}")
        if self.l2_lambda < 0:
            raise ValueError(f"l2_lambda must be >= 0, got {self.l2_lambda}")
        if self.n_bins < 2:
            raise ValueError(f"n_bins must be >= 2, got {self.n_bins}")
        if not 0 < self.learning_rate <= 1:
            raise ValueError(f"learning_rate must be in (0,1], got {self.learning_rate}")
        if not 0 < self.train_fraction < 1:
            raise ValueError(f"train_fraction must be in (0,1), got {self.train_fraction}")


class Tree:
    """Flat-array binary regression tree; internal nodes split on x <= threshold."""

    __slots__ = ("feature", "threshold", "left", "right", "value")

    def __init__(self, feature, threshold, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=float)
        if not np.all(np.isfinite(self.value)):
            raise ValueError("non-finite leaf values")

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf value for every row of X."""
        n = len(X)
        rows = np.arange(n)
        node = np.zeros(n, dtype=np.int64)
        # each pass descends every unfinished row one level
        for _ in range(self.n_nodes):
            pending = self.feature[node] >= 0
            if not pending.any():
                break
            r = rows[pending]
            nd = node[pending]
            go_left = X[r, self.feature[nd]] <= self.threshold[nd]
            node[pending] = np.where(go_left, self.left[nd], self.right[nd])
        return self.value[node]

    def root_split(self) -> tuple[int, float] | None:
        """(feature, threshold) of the root, or None for a lone leaf."""
        if self.is_leaf(0):
            return None
        return int(self.feature[0]), float(self.threshold[0])


@dataclass
class TreeEnsemble:
    """prediction(x) = base_score + learning_rate * sum_k tree_k(x)."""

    base_score: float
    learning_rate: float
    trees: list[Tree] = field(default_factory=list)
    n_features: int = 0
    schema_fingerprint: str = ""
    meta: dict[str, str] = field(default_factory=dict)
    train_mse: list[float] = field(default_factory=list)

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(
                f"feature matrix has {X.shape[1] if X.ndim == 2 else '?'} columns, "
                f"model expects {self.n_features}"
            )
        out = np.full(len(X), self.base_score)
        for tree in self.trees:
            out += self.learning_rate * tree.apply(X)
        return out


def predict(model: TreeEnsemble, x: Iterable[float]) -> float:
    """Ensemble prediction for a single feature vector."""
    x = np.asarray(list(x) if not isinstance(x, np.ndarray) else x, dtype=float)
    if x.ndim != 1 or len(x) != model.n_features:
        raise ValueError(f"feature vector has {x.shape} shape, model expects ({model.n_features},)")
    return float(model.predict_matrix(x[None, :])[0])


def compute_bin_boundaries(X: np.ndarray, n_bins: int) -> list[np.ndarray]:
    """Per-feature split candidates: training-set quantile values below the
    feature maximum (a split at the maximum would send every row left)."""
    boundaries = []
    quantiles = np.arange(1, n_bins) / n_bins
    for f in range(X.shape[1]):
        col = X[:, f]
        cand = np.unique(np.quantile(col, quantiles, method="lower"))
        boundaries.append(cand[cand < col.max()])
    return boundaries


class _HistogramGrower:
    """Shared binning state for all boosting rounds of one fit."""

    def __init__(self, X: np.ndarray, cfg: TrainConfig):
        self.cfg = cfg
        self.n, self.d = X.shape
        self.boundaries = compute_bin_boundaries(X, cfg.n_bins)
        self.n_thr = np.array([len(b) for b in self.boundaries])
        # bin b means boundaries[b-1] < x <= boundaries[b]; b == n_thr means
        # beyond the last candidate (never goes left)
        self.width = int(self.n_thr.max()) + 1 if self.d else 1
        self.bins = np.empty((self.n, self.d), dtype=np.int64)
        for f in range(self.d):
            self.bins[:, f] = np.searchsorted(self.boundaries[f], X[:, f], side="left")
        self._flat_offset = np.arange(self.d, dtype=np.int64) * self.width
        # mask of valid threshold columns per feature
        self._thr_valid = np.arange(self.width - 1)[None, :] < self.n_thr[:, None]

    def best_split(self, idx: np.ndarray, residuals: np.ndarray):
        """Best (gain, feature, thr_index) for the samples in ``idx``, or None."""
        cfg = self.cfg
        m = len(idx)
        if m < 2 * cfg.min_samples_leaf or self.width < 2:
            return None
        res = residuals[idx]
        G = res.sum()
        parent_score = G * G / (m + cfg.l2_lambda)

        flat = (self.bins[idx] + self._flat_offset).ravel()
        grad_hist = np.bincount(flat, weights=np.repeat(res, self.d), minlength=self.d * self.width)
        cnt_hist = np.bincount(flat, minlength=self.d * self.width)
        GL = grad_hist.reshape(self.d, self.width).cumsum(axis=1)[:, :-1]
        NL = cnt_hist.reshape(self.d, self.width).cumsum(axis=1)[:, :-1]
        NR = m - NL
        with np.errstate(divide="ignore", invalid="ignore"):
            gains = (
                GL * GL / (NL + cfg.l2_lambda)
                + (G - GL) * (G - GL) / (NR + cfg.l2_lambda)
                - parent_score
            )
        valid = (
            self._thr_valid
            & (NL >= cfg.min_samples_leaf)
            & (NR >= cfg.min_samples_leaf)
        )
        gains = np.where(valid, gains, -np.inf)
        best_flat = int(np.argmax(gains))  # row-major: lowest feature, then lowest bin
        best_gain = gains.ravel()[best_flat]
        if not best_gain > 0.0:
            return None
        return float(best_gain), best_flat // (self.width - 1), best_flat % (self.width - 1)

    def grow_tree(self, residuals: np.ndarray) -> tuple[Tree, np.ndarray]:
        """Grow one leaf-wise tree on the residuals; returns the tree and the
        per-sample tree output."""
        cfg = self.cfg
        feature, threshold, left, right = [-1], [0.0], [-1], [-1]
        samples = {0: np.arange(self.n)}
        candidates = {0: self.best_split(samples[0], residuals)}
        n_leaves = 1
        while n_leaves < cfg.max_leaves:
            best_node, best = -1, None
            for node in sorted(candidates):  # earliest leaf wins ties
                cand = candidates[node]
                if cand is not None and (best is None or cand[0] > best[0]):
                    best_node, best = node, cand
            if best is None:
                break
            _, f, j = best
            thr = self.boundaries[f][j]
            idx = samples.pop(best_node)
            del candidates[best_node]
            go_left = self.bins[idx, f] <= j

            node_l, node_r = len(feature), len(feature) + 1
            feature[best_node], threshold[best_node] = f, float(thr)
            left[best_node], right[best_node] = node_l, node_r
            for child, child_idx in ((node_l, idx[go_left]), (node_r, idx[~go_left])):
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                samples[child] = child_idx
                candidates[child] = self.best_split(child_idx, residuals)
            n_leaves += 1

        value = np.zeros(len(feature))
        contrib = np.empty(self.n)
        for node, idx in samples.items():
            value[node] = residuals[idx].sum() / (len(idx) + cfg.l2_lambda)
            contrib[idx] = value[node]
        return Tree(feature, threshold, left, right, value), contrib


def fit(
    rows: list[FeatureRow],
    cfg: TrainConfig,
    seed: int | None = None,
    schema: FeatureSchema | None = None,
) -> TreeEnsemble:
    """Fit a boosted ensemble to feature rows.

    The fit is fully deterministic; ``seed`` is reserved for stochastic
    variants (row/feature subsampling) and currently unused.
    """
    del seed
    X, y = rows_to_arrays(rows)
    if len(y) and not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    fingerprint = schema.fingerprint() if schema is not None else f"d{X.shape[1]}:unnamed"
    model = TreeEnsemble(
        base_score=float(y.mean()) if len(y) else 0.0,
        learning_rate=cfg.learning_rate,
        n_features=int(X.shape[1]),
        schema_fingerprint=fingerprint,
    )
    if len(y) < 2 * cfg.min_samples_leaf:
        return model

    grower = _HistogramGrower(X, cfg)
    pred = np.full(len(y), model.base_score)
    for _ in range(cfg.n_rounds):
        residuals = y - pred
        if not residuals.any():
            break
        tree, contrib = grower.grow_tree(residuals)
        model.trees.append(tree)
        pred += cfg.learning_rate * contrib
        model.train_mse.append(float(np.mean((y - pred) ** 2)))
    return model


def seasonal_naive_forecast(series: DemandSeries, t: int) -> float:
    """Demand observed one weekly cycle earlier: D_{t-7}."""
    if t < 7:
        raise ValueError(f"seasonal-naive forecast needs t >= 7, got t={t}")
    if t >= len(series):
        raise ValueError(f"t={t} beyond series of length {len(series)}")
    return float(series.values[t - 7])


# --- persistence: versioned field-tagged text document ---

_FORMAT_TAG = "opcomm-gbt"
_FORMAT_VERSION = 1


def save_model(model: TreeEnsemble, meta: Mapping[str, str] | None = None) -> str:
    """Serialize to the versioned text format; floats survive round trips
    bit-exactly via repr."""
    lines = [f"{_FORMAT_TAG} v{_FORMAT_VERSION}"]
    for key, val in {**model.meta, **(meta or {})}.items():
        lines.append(f"meta {key} {val}")
    lines.append(f"base_score {model.base_score!r}")
    lines.append(f"learning_rate {model.learning_rate!r}")
    lines.append(f"n_features {model.n_features}")
    lines.append(f"schema {model.schema_fingerprint}")
    lines.append(f"n_trees {len(model.trees)}")
    for i, tree in enumerate(model.trees):
        lines.append(f"tree {i} {tree.n_nodes}")
        for node in range(tree.n_nodes):
            if tree.is_leaf(node):
                lines.append(f"node leaf {float(tree.value[node])!r}")
            else:
                lines.append(
                    f"node split {tree.feature[node]} {float(tree.threshold[node])!r} "
                    f"{tree.left[node]} {tree.right[node]}"
                )
    lines.append("end")
    return "\n".join(lines) + "\n"


def load_model(document: str) -> TreeEnsemble:
    """Parse a document produced by :func:`save_model`; malformed input is
    rejected with the offending line number."""
    reader = DocReader(document)
    check_header(reader, _FORMAT_TAG, _FORMAT_VERSION)
    meta = reader.read_meta()
    base_score = reader.scalar("base_score", float)
    learning_rate = reader.scalar("learning_rate", float)
    n_features = reader.scalar("n_features", int)
    schema_parts = reader.expect("schema")
    schema_fingerprint = schema_parts[0] if schema_parts else ""
    n_trees = reader.scalar("n_trees", int)

    trees = []
    for i in range(n_trees):
        head = reader.expect("tree")
        if len(head) != 2 or head[0] != str(i):
            raise reader.error(f"expected tree {i} header, got {head}")
        try:
            n_nodes = int(head[1])
        except ValueError as exc:
            raise reader.error(f"bad node count {head[1]!r}") from exc
        feature, threshold, left, right, value = [], [], [], [], []
        for _ in range(n_nodes):
            parts = reader.expect("node")
            try:
                if parts[0] == "leaf" and len(parts) == 2:
                    feature.append(-1)
                    threshold.append(0.0)
                    left.append(-1)
                    right.append(-1)
                    value.append(float(parts[1]))
                elif parts[0] == "split" and len(parts) == 5:
                    feature.append(int(parts[1]))
                    threshold.append(float(parts[2]))
                    left.append(int(parts[3]))
                    right.append(int(parts[4]))
                    value.append(0.0)
                else:
                    raise reader.error(f"bad node line {parts}")
            except ValueError as exc:
                raise reader.error(f"bad node field in {parts}") from exc
        if any(f >= n_features for f in feature):
            raise reader.error(f"tree {i} references feature beyond n_features={n_features}")
        trees.append(Tree(feature, threshold, left, right, value))

    reader.expect("end")
    return TreeEnsemble(
        base_score=base_score,
        learning_rate=learning_rate,
        trees=trees,
        n_features=n_features,
        schema_fingerprint=schema_fingerprint,
        meta=meta,
    )


def save_model_file(model: TreeEnsemble, path: str | Path, meta: Mapping[str, str] | None = None):
    Path(path).write_text(save_model(model, meta))


def load_model_file(path: str | Path) -> TreeEnsemble:
    return load_model(Path(path).read_text())
