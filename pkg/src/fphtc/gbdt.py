"""Multiclass gradient-boosted regression trees with a softmax readout.

Second-order boosting: every round fits one regression tree per class to the
softmax gradients and hessians of the current scores, using exact greedy
splits, and adds ``learning_rate`` times the Newton leaf values.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .features import SCHEMA_NAME, SCHEMA_VERSION
from .traffic import N_CLASSES, CoSLabel


@dataclass(frozen=True)
class GbdtConfig:
    n_rounds: int = 100
    learning_rate: float = 0.3
    max_depth: int | None = 6
    max_leaves: int | None = None
    min_child_weight: float = 1.0
    l2_reg: float = 1.0
    n_classes: int = N_CLASSES
    growth: str = "depthwise"

    def __post_init__(self):
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1 or None")
        if self.max_leaves is not None and self.max_leaves < 2:
            raise ValueError("max_leaves must be >= 2 or None")
        if self.min_child_weight < 0 or self.l2_reg < 0:
            raise ValueError("min_child_weight and l2_reg must be >= 0")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.growth not in ("depthwise", "leafwise"):
            raise ValueError(f"unknown growth strategy {self.growth!r}")
        if self.growth == "leafwise" and self.max_leaves is None:
            raise ValueError("leafwise growth needs max_leaves")


GBDT_PRESETS = {
    "depthwise": GbdtConfig(),
    # best-first growth capped by leaf count instead of depth
    "leafwise": GbdtConfig(max_depth=None, max_leaves=31, growth="leafwise"),
}


@dataclass(frozen=True)
class RegressionTree:
    """Flat array tree. ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of X."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            feat = self.feature[node]
            inner = feat >= 0
            if not inner.any():
                return node
            f = np.where(inner, feat, 0)
            go_left = X[rows, f] <= self.threshold[node]
            node = np.where(inner, np.where(go_left, self.left[node], self.right[node]), node)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


@dataclass(frozen=True)
class Split:
    feature_index: int
    threshold: float
    gain: float


@dataclass
class GbdtModel:
    trees: list  # per round, a list of n_classes RegressionTree
    config: GbdtConfig
    base_score: float = 0.0
    n_features: int | None = None
    schema_name: str = SCHEMA_NAME
    schema_version: int = SCHEMA_VERSION
    train_loss: list = field(default_factory=list)

    @property
    def n_rounds(self) -> int:
        return len(self.trees)

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if self.n_features is not None and X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def predict_scores(self, X: np.ndarray) -> np.ndarray:
        X = self._check(X)
        scores = np.full((X.shape[0], self.n_classes), self.base_score)
        lr = self.config.learning_rate
        for round_trees in self.trees:
            for k, tree in enumerate(round_trees):
                scores[:, k] += lr * tree.predict(X)
        return scores

    def predict_labels(self, X: np.ndarray) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest class
        return np.argmax(self.predict_scores(X), axis=1)


def predict_scores(m: GbdtModel, x) -> np.ndarray:
    """Scores for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("predict_scores takes one feature vector")
    return m.predict_scores(x)[0]


def label_from_scores(scores) -> CoSLabel:
    return CoSLabel(int(np.argmax(np.asarray(scores))))


def predict_label(m: GbdtModel, x) -> CoSLabel:
    return label_from_scores(predict_scores(m, x))


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - np.max(scores, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_gradient_hessian(scores, true_class: int) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    if not 0 <= true_class < s.shape[-1]:
        raise ValueError("true_class out of range")
    p = softmax(s)
    g = p.copy()
    g[true_class] -= 1.0
    return g, p * (1.0 - p)


def log_loss(scores: np.ndarray, y: np.ndarray) -> float:
    """Mean multiclass cross-entropy of softmax(scores)."""
    z = scores - np.max(scores, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1))
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def best_split(sample_indices, X: np.ndarray, g: np.ndarray, h: np.ndarray,
               config: GbdtConfig) -> Split | None:
    """Exact greedy split maximizing the second-order gain.

    Candidate thresholds are midpoints between consecutive distinct sorted
    values. Candidates whose children have hessian sums below
    ``min_child_weight`` are excluded. Ties go to the lowest feature index,
    then the lowest threshold.
    """
    idx = np.asarray(sample_indices)
    if idx.size < 2:
        return None
    order = np.argsort(X[idx], axis=0, kind="stable").T
    return _best_split_sorted(idx[order], X, g, h, config)


def _best_split_sorted(sorted_idx, X, g, h, config: GbdtConfig) -> Split | None:
    # sorted_idx[f] lists the node's samples in ascending order of feature f
    n_feat, m = sorted_idx.shape
    if m < 2:
        return None
    xs = X[sorted_idx, np.arange(n_feat)[:, None]]
    gs = g[sorted_idx]
    hs = h[sorted_idx]
    GL = np.cumsum(gs, axis=1)
    HL = np.cumsum(hs, axis=1)
    G = GL[:, -1:]
    H = HL[:, -1:]
    GL, HL = GL[:, :-1], HL[:, :-1]
    GR = G - GL
    HR = H - HL
    lam = config.l2_reg
    valid = (xs[:, 1:] != xs[:, :-1]) & (HL >= config.min_child_weight) & (HR >= config.min_child_weight)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = 0.5 * (GL ** 2 / (HL + lam) + GR ** 2 / (HR + lam) - G ** 2 / (H + lam))
    gain = np.where(valid, gain, -np.inf)
    # row-major over (feature, position): argmax prefers low feature, then low threshold
    best = int(np.argmax(gain))
    f, pos = divmod(best, m - 1)
    best_gain = gain[f, pos]
    if not best_gain > 0:
        return None
    thr = 0.5 * (xs[f, pos] + xs[f, pos + 1])
    return Split(int(f), float(thr), float(best_gain))


class _TreeBuilder:
    def __init__(self, X, g, h, config: GbdtConfig, presorted=None):
        self.X, self.g, self.h, self.cfg = X, g, h, config
        if presorted is None:
            presorted = np.argsort(X, axis=0, kind="stable").T
        self.presorted = presorted
        self.feature, self.threshold, self.left, self.right, self.value = [], [], [], [], []
        self.leaf_of = np.zeros(X.shape[0], dtype=np.int64)
        self._goes_left = np.zeros(X.shape[0], dtype=bool)

    def _new_node(self, sorted_idx) -> int:
        node = len(self.feature)
        idx = sorted_idx[0]
        G = float(np.sum(self.g[idx]))
        H = float(np.sum(self.h[idx]))
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(-G / (H + self.cfg.l2_reg))
        self.leaf_of[idx] = node
        return node

    def _split(self, node, sorted_idx, split: Split):
        idx = sorted_idx[0]
        gl = self.X[idx, split.feature_index] <= split.threshold
        self._goes_left[idx] = gl
        n_left = int(gl.sum())
        mask = self._goes_left[sorted_idx]
        n_feat = sorted_idx.shape[0]
        li = sorted_idx[mask].reshape(n_feat, n_left)
        ri = sorted_idx[~mask].reshape(n_feat, -1)
        self.feature[node] = split.feature_index
        self.threshold[node] = split.threshold
        self.value[node] = 0.0
        self.left[node] = self._new_node(li)
        self.right[node] = self._new_node(ri)
        return li, ri

    def _find(self, sorted_idx):
        return _best_split_sorted(sorted_idx, self.X, self.g, self.h, self.cfg)

    def grow_depthwise(self):
        root = self.presorted
        stack = [(self._new_node(root), root, 0)]
        max_depth = self.cfg.max_depth
        while stack:
            node, sidx, depth = stack.pop()
            if max_depth is not None and depth >= max_depth:
                continue
            split = self._find(sidx)
            if split is None:
                continue
            li, ri = self._split(node, sidx, split)
            stack.append((self.right[node], ri, depth + 1))
            stack.append((self.left[node], li, depth + 1))

    def grow_leafwise(self):
        heap = []
        counter = 0
        max_depth = self.cfg.max_depth

        def push(node, sidx, depth):
            nonlocal counter
            if max_depth is not None and depth >= max_depth:
                return
            split = self._find(sidx)
            if split is not None:
                heapq.heappush(heap, (-split.gain, counter, node, sidx, depth, split))
                counter += 1

        push(self._new_node(self.presorted), self.presorted, 0)
        leaves = 1
        while heap and leaves < self.cfg.max_leaves:
            _, _, node, sidx, depth, split = heapq.heappop(heap)
            li, ri = self._split(node, sidx, split)
            leaves += 1
            push(self.left[node], li, depth + 1)
            push(self.right[node], ri, depth + 1)

    def build(self) -> RegressionTree:
        if self.cfg.growth == "leafwise":
            self.grow_leafwise()
        else:
            self.grow_depthwise()
        return RegressionTree(
            np.asarray(self.feature, dtype=np.int64),
            np.asarray(self.threshold, dtype=np.float64),
            np.asarray(self.left, dtype=np.int64),
            np.asarray(self.right, dtype=np.int64),
            np.asarray(self.value, dtype=np.float64),
        )


def fit_tree(X, g, h, config: GbdtConfig, presorted=None) -> tuple[RegressionTree, np.ndarray]:
    """Fit one regression tree; also return each training row's leaf."""
    b = _TreeBuilder(X, g, h, config, presorted)
    tree = b.build()
    return tree, b.leaf_of


def train_gbdt(X, y: Sequence, config: GbdtConfig = GbdtConfig(), seed: int = 0) -> GbdtModel:
    """Train the boosted ensemble.

    ``seed`` is accepted for interface uniformity; training is exact and
    uses no randomness.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray([int(v) for v in y], dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be 2-D with one row per label")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature matrix contains non-finite values")
    K = config.n_classes
    if np.any((y < 0) | (y >= K)):
        raise ValueError("label outside [0, n_classes)")
    missing = sorted(set(range(K)) - set(y.tolist()))
    if missing:
        raise ValueError(f"classes missing from training labels: {missing}")

    n = X.shape[0]
    onehot = np.zeros((n, K))
    onehot[np.arange(n), y] = 1.0
    scores = np.zeros((n, K))
    model = GbdtModel([], config, 0.0, X.shape[1])
    model.train_loss.append(log_loss(scores, y))
    presorted = np.argsort(X, axis=0, kind="stable").T
    for _ in range(config.n_rounds):
        p = softmax(scores)
        G = p - onehot
        H = p * (1.0 - p)
        round_trees = []
        for k in range(K):
            tree, leaf_of = fit_tree(X, G[:, k], H[:, k], config, presorted)
            round_trees.append(tree)
            scores[:, k] += config.learning_rate * tree.value[leaf_of]
        model.trees.append(round_trees)
        model.train_loss.append(log_loss(scores, y))
    return model

