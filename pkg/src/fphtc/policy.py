"""Packet-header decision tree (the router's student) and its compiled rule table."""

from __future__ import annotations

import heapq
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .traffic import N_CLASSES, CoSLabel, Flow, LabelKind, Packet, flow_label

FEATURE_NAMES = ("srcip", "dstip", "sport", "dport")
DOMAIN_HI = (1 << 32, 1 << 32, 1 << 16, 1 << 16)
_GAIN_EPS = 1e-12


class PacketFeatures(NamedTuple):
    src_ip_dec: int
    dst_ip_dec: int
    src_port: int
    dst_port: int


class PacketRecord(NamedTuple):
    features: PacketFeatures
    label: CoSLabel


def packet_features(p: Packet) -> PacketFeatures:
    return PacketFeatures(int(p.src_ip), int(p.dst_ip), int(p.src_port), int(p.dst_port))


@dataclass
class PacketDataset:
    """Unique directed 4-tuples as an (N, 4) integer matrix with labels."""

    X: np.ndarray
    y: np.ndarray
    conflicts: int = 0

    def __len__(self):
        return len(self.y)

    @property
    def records(self) -> list[PacketRecord]:
        return [PacketRecord(PacketFeatures(*map(int, row)), CoSLabel(int(lab)))
                for row, lab in zip(self.X, self.y)]

    @classmethod
    def from_records(cls, records: Sequence[PacketRecord]) -> "PacketDataset":
        X = np.array([tuple(r.features) for r in records], dtype=np.int64).reshape(-1, 4)
        y = np.array([int(r.label) for r in records], dtype=np.int64)
        return cls(X, y)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=N_CLASSES)


def unique_tuples(flows: Sequence[Flow]) -> dict[tuple, list]:
    """Directed 4-tuple -> flow indices, one entry per packet, first-seen order."""
    seen: dict[tuple, list] = {}
    for i, f in enumerate(flows):
        for p in f.packets:
            key = (p.src_ip, p.dst_ip, p.src_port, p.dst_port)
            lst = seen.get(key)
            if lst is None:
                seen[key] = [i]
            else:
                lst.append(i)
    return seen


def build_packet_dataset(flows: Sequence[Flow], label_kind: LabelKind = LabelKind.TeacherPredicted) -> PacketDataset:
    """One record per unique directed 4-tuple, labeled by its flow.

    A 4-tuple whose packets come from flows with different labels takes the
    label held by most of those packets (ties go to the label seen first) and
    counts once toward ``conflicts``.
    """
    labels = [int(flow_label(f, label_kind)) for f in flows]
    seen = unique_tuples(flows)
    X = np.empty((len(seen), 4), dtype=np.int64)
    y = np.empty(len(seen), dtype=np.int64)
    conflicts = 0
    for r, (key, owners) in enumerate(seen.items()):
        X[r] = key
        first = labels[owners[0]]
        if all(labels[o] == first for o in owners):
            y[r] = first
            continue
        conflicts += 1
        votes = Counter(labels[o] for o in owners)
        top = max(votes.values())
        # Counter keeps first-insertion order, so the first label reaching `top` was seen first
        y[r] = next(lab for lab, c in votes.items() if c == top)
    return PacketDataset(X, y, conflicts)


@dataclass(frozen=True)
class CartConfig:
    max_depth: int | None = None
    max_leaf_nodes: int | None = None
    min_samples_split: int = 2
    criterion: str = "entropy"
    class_weighting: str = "balanced"

    def __post_init__(self):
        if self.criterion != "entropy" or self.class_weighting != "balanced":
            raise ValueError("only entropy splits with balanced class weights are supported")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1 or None")
        if self.max_leaf_nodes is not None and self.max_leaf_nodes < 2:
            raise ValueError("max_leaf_nodes must be >= 2 or None")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")


def _apply(feature, threshold, left, right, X) -> np.ndarray:
    node = np.zeros(X.shape[0], dtype=np.int64)
    rows = np.arange(X.shape[0])
    while True:
        feat = feature[node]
        inner = feat >= 0
        if not inner.any():
            return node
        f = np.where(inner, feat, 0)
        go_left = X[rows, f] <= threshold[node]
        node = np.where(inner, np.where(go_left, left[node], right[node]), node)


@dataclass(frozen=True)
class DecisionTree:
    feature: np.ndarray       # -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    label: np.ndarray         # weighted-majority class of each node
    class_counts: np.ndarray  # (n_nodes, 3) raw training counts
    class_weight: np.ndarray  # (3,) per-class sample weight

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    @property
    def depth(self) -> int:
        d = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                d[self.left[i]] = d[self.right[i]] = d[i] + 1
        return int(d.max())

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64).reshape(-1, 4)
        return _apply(self.feature, self.threshold, self.left, self.right, X)

    def predict(self, X) -> np.ndarray:
        return self.label[self.apply(X)]


def classify(tree: DecisionTree, f) -> CoSLabel:
    node = 0
    while tree.feature[node] >= 0:
        node = tree.left[node] if f[tree.feature[node]] <= tree.threshold[node] else tree.right[node]
    return CoSLabel(int(tree.label[node]))


def _entropy(W: np.ndarray) -> np.ndarray:
    """Base-2 entropy of weighted class totals along the last axis."""
    tot = W.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(tot > 0, W / tot, 0.0)
        logs = np.where(p > 0, np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return -(p * logs).sum(axis=-1)


@dataclass(frozen=True)
class CartSplit:
    feature_index: int
    threshold: float
    gain: float


def _best_cart_split(sorted_idx, X, sw_onehot) -> CartSplit | None:
    n_feat, m = sorted_idx.shape
    if m < 2:
        return None
    xs = X[sorted_idx, np.arange(n_feat)[:, None]]
    cum = np.cumsum(sw_onehot[sorted_idx], axis=1)   # (F, m, K)
    total = cum[0, -1]
    WL = cum[:, :-1]
    WR = total - WL
    wl = WL.sum(axis=-1)
    wr = WR.sum(axis=-1)
    W = total.sum()
    parent = _entropy(total[None, :])[0]
    gain = parent - (wl / W) * _entropy(WL) - (wr / W) * _entropy(WR)
    valid = xs[:, 1:] != xs[:, :-1]
    if not valid.any():
        return None
    gain = np.where(valid, gain, -np.inf)
    best = int(np.argmax(gain))
    f, pos = divmod(best, m - 1)
    g = float(gain[f, pos])
    if not g > _GAIN_EPS:
        return None
    return CartSplit(int(f), float(0.5 * (xs[f, pos] + xs[f, pos + 1])), g)


def best_cart_split(sample_indices, X, y, class_weight) -> CartSplit | None:
    """Best entropy split of the given samples (lowest feature, then threshold, on ties)."""
    X = np.asarray(X, dtype=np.float64)
    idx = np.asarray(sample_indices)
    sw = np.zeros((len(y), N_CLASSES))
    sw[np.arange(len(y)), y] = np.asarray(class_weight)[y]
    order = np.argsort(X[idx], axis=0, kind="stable").T
    return _best_cart_split(idx[order], X, sw)


def balanced_class_weight(y: np.ndarray) -> np.ndarray:
    counts = np.bincount(y, minlength=N_CLASSES).astype(np.float64)
    with np.errstate(divide="ignore"):
        w = np.where(counts > 0, len(y) / (N_CLASSES * counts), 0.0)
    return w


class _CartBuilder:
    def __init__(self, X, y, config: CartConfig):
        self.X = X
        self.y = y
        self.cfg = config
        self.class_weight = balanced_class_weight(y)
        self.sw = np.zeros((len(y), N_CLASSES))
        self.sw[np.arange(len(y)), y] = self.class_weight[y]
        self.onehot = np.zeros((len(y), N_CLASSES), dtype=np.int64)
        self.onehot[np.arange(len(y)), y] = 1
        self.nodes_f, self.nodes_t, self.nodes_l, self.nodes_r = [], [], [], []
        self.labels, self.counts = [], []
        self._goes_left = np.zeros(len(y), dtype=bool)

    def new_node(self, sidx) -> int:
        idx = sidx[0]
        counts = self.onehot[idx].sum(axis=0)
        weighted = counts * self.class_weight
        self.nodes_f.append(-1)
        self.nodes_t.append(0.0)
        self.nodes_l.append(-1)
        self.nodes_r.append(-1)
        self.labels.append(int(np.argmax(weighted)))
        self.counts.append(counts)
        return len(self.nodes_f) - 1

    def find(self, sidx, depth) -> CartSplit | None:
        m = sidx.shape[1]
        if m < self.cfg.min_samples_split:
            return None
        if self.cfg.max_depth is not None and depth >= self.cfg.max_depth:
            return None
        if np.count_nonzero(self.onehot[sidx[0]].sum(axis=0)) <= 1:
            return None
        return _best_cart_split(sidx, self.X, self.sw)

    def split(self, node, sidx, s: CartSplit):
        idx = sidx[0]
        gl = self.X[idx, s.feature_index] <= s.threshold
        self._goes_left[idx] = gl
        mask = self._goes_left[sidx]
        n_left = int(gl.sum())
        li = sidx[mask].reshape(sidx.shape[0], n_left)
        ri = sidx[~mask].reshape(sidx.shape[0], -1)
        self.nodes_f[node] = s.feature_index
        self.nodes_t[node] = s.threshold
        self.nodes_l[node] = self.new_node(li)
        self.nodes_r[node] = self.new_node(ri)
        return li, ri

    def grow(self):
        root = np.argsort(self.X, axis=0, kind="stable").T
        root_node = self.new_node(root)
        if self.cfg.max_leaf_nodes is None:
            stack = [(root_node, root, 0)]
            while stack:
                node, sidx, depth = stack.pop()
                s = self.find(sidx, depth)
                if s is None:
                    continue
                li, ri = self.split(node, sidx, s)
                stack.append((self.nodes_r[node], ri, depth + 1))
                stack.append((self.nodes_l[node], li, depth + 1))
            return
        heap = []
        counter = 0

        def push(node, sidx, depth):
            nonlocal counter
            s = self.find(sidx, depth)
            if s is not None:
                heapq.heappush(heap, (-s.gain, counter, node, sidx, depth, s))
                counter += 1

        push(root_node, root, 0)
        leaves = 1
        while heap and leaves < self.cfg.max_leaf_nodes:
            _, _, node, sidx, depth, s = heapq.heappop(heap)
            li, ri = self.split(node, sidx, s)
            leaves += 1
            push(self.nodes_l[node], li, depth + 1)
            push(self.nodes_r[node], ri, depth + 1)

    def tree(self) -> DecisionTree:
        return DecisionTree(
            np.asarray(self.nodes_f, dtype=np.int64),
            np.asarray(self.nodes_t, dtype=np.float64),
            np.asarray(self.nodes_l, dtype=np.int64),
            np.asarray(self.nodes_r, dtype=np.int64),
            np.asarray(self.labels, dtype=np.int64),
            np.asarray(self.counts, dtype=np.int64).reshape(-1, N_CLASSES),
            self.class_weight.copy(),
        )


def train_cart(records, config: CartConfig = CartConfig(), seed: int = 0) -> DecisionTree:
    """Grow a CART with entropy splits and balanced class weights.

    Sample weight of class k is N / (3 * N_k). Growth is depth-first when the
    leaf count is unlimited and best-first by gain otherwise. ``seed`` is
    accepted for interface uniformity; the build is deterministic given the
    input order.
    """
    ds = records if isinstance(records, PacketDataset) else PacketDataset.from_records(list(records))
    if len(ds) == 0:
        raise ValueError("cannot train a tree on zero records")
    b = _CartBuilder(ds.X.astype(np.float64), ds.y.astype(np.int64), config)
    b.grow()
    return b.tree()


# --- routing policy -------------------------------------------------------

@dataclass(frozen=True)
class Rule:
    lo: tuple[int, int, int, int]
    hi: tuple[int, int, int, int]
    action: CoSLabel

    def matches(self, f) -> bool:
        return all(lo <= v < hi for lo, v, hi in zip(self.lo, f, self.hi))

    def volume(self) -> int:
        v = 1
        for lo, hi in zip(self.lo, self.hi):
            v *= max(0, hi - lo)
        return v


@dataclass(frozen=True)
class RoutingPolicy:
    rules: tuple[Rule, ...]

    def __len__(self):
        return len(self.rules)

    def _bounds(self):
        lo = np.array([r.lo for r in self.rules], dtype=np.int64).reshape(-1, 4)
        hi = np.array([r.hi for r in self.rules], dtype=np.int64).reshape(-1, 4)
        act = np.array([int(r.action) for r in self.rules], dtype=np.int64)
        return lo, hi, act

    def match_counts(self, X) -> tuple[np.ndarray, np.ndarray]:
        """For each row: the action of the last matching rule and how many rules matched."""
        X = np.asarray(X, dtype=np.int64).reshape(-1, 4)
        lo, hi, act = self._bounds()
        out = np.full(len(X), -1, dtype=np.int64)
        hits = np.zeros(len(X), dtype=np.int64)
        for r in range(len(act)):
            m = np.all((X >= lo[r]) & (X < hi[r]), axis=1)
            out[m] = act[r]
            hits += m
        return out, hits

    def classify_many(self, X) -> np.ndarray:
        out, hits = self.match_counts(X)
        if np.any(hits != 1):
            raise ValueError("policy does not match every packet exactly once")
        return out


def match(policy: RoutingPolicy, f) -> Rule:
    found = [r for r in policy.rules if r.matches(f)]
    if len(found) != 1:
        raise ValueError(f"{len(found)} rules match {tuple(f)}")
    return found[0]


def compile_rules(tree: DecisionTree) -> RoutingPolicy:
    """One rule per leaf: the box cut out by the root-to-leaf comparisons.

    On the integer domain ``x <= t`` is ``x < floor(t) + 1``.
    """
    rules = []
    stack = [(0, (0, 0, 0, 0), DOMAIN_HI)]
    while stack:
        node, lo, hi = stack.pop()
        f = int(tree.feature[node])
        if f < 0:
            rules.append((node, Rule(lo, hi, CoSLabel(int(tree.label[node])))))
            continue
        cut = int(np.floor(tree.threshold[node])) + 1
        lhi = list(hi)
        lhi[f] = min(hi[f], max(lo[f], cut))
        rlo = list(lo)
        rlo[f] = max(lo[f], min(hi[f], cut))
        stack.append((int(tree.right[node]), tuple(rlo), hi))
        stack.append((int(tree.left[node]), lo, tuple(lhi)))
    rules.sort(key=lambda t: t[0])
    return RoutingPolicy(tuple(r for _, r in rules))


def check_partition(policy: RoutingPolicy) -> None:
    """Raise unless the rules are pairwise disjoint and cover the whole domain."""
    if not policy.rules:
        raise ValueError("empty policy covers nothing")
    lo, hi, _ = policy._bounds()
    n = len(lo)
    for i in range(n):
        overlap = np.all((lo[i] < hi[i + 1:]) & (lo[i + 1:] < hi[i]), axis=1)
        nonempty = np.all(lo[i + 1:] < hi[i + 1:], axis=1) & bool(np.all(lo[i] < hi[i]))
        if np.any(overlap & nonempty):
            j = i + 1 + int(np.argmax(overlap & nonempty))
            raise ValueError(f"rules {i} and {j} overlap")
    full = 1
    for h in DOMAIN_HI:
        full *= h
    covered = sum(r.volume() for r in policy.rules)
    if covered != full:
        raise ValueError(f"rules cover {covered} of {full} points")


def format_rule(rule: Rule) -> str:
    parts = [f"{name}:[{lo},{hi})" for name, lo, hi in zip(FEATURE_NAMES, rule.lo, rule.hi)]
    return " ".join(parts) + f" -> {rule.action.name}"


_RULE_RE = re.compile(
    r"^\s*" + r"\s+".join(rf"{n}:\[(\d+),(\d+)\)" for n in FEATURE_NAMES) + r"\s*->\s*(\w+)\s*$")


def parse_rule(line: str) -> Rule:
    m = _RULE_RE.match(line)
    if m is None:
        raise ValueError("expected 'srcip:[lo,hi) dstip:[lo,hi) sport:[lo,hi) dport:[lo,hi) -> ACTION'")
    nums = [int(v) for v in m.groups()[:8]]
    try:
        action = CoSLabel[m.group(9)]
    except KeyError:
        raise ValueError(f"unknown action {m.group(9)!r}") from None
    lo = tuple(nums[0::2])
    hi = tuple(nums[1::2])
    for name, a, b, top in zip(FEATURE_NAMES, lo, hi, DOMAIN_HI):
        if not 0 <= a <= b <= top:
            raise ValueError(f"{name} interval [{a},{b}) outside [0,{top})")
    return Rule(lo, hi, action)


def export_policy(policy: RoutingPolicy, path) -> None:
    if not policy.rules:
        raise ValueError("refusing to export an empty policy")
    Path(path).write_text("".join(format_rule(r) + "\n" for r in policy.rules), encoding="utf-8")


def import_policy(path) -> RoutingPolicy:
    rules = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            rules.append(parse_rule(line))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not rules:
        raise ValueError(f"{path}: policy has no rules")
    return RoutingPolicy(tuple(rules))
