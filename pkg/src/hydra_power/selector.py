"""Random-forest power-model selector.

Training labels come from ``label_windows``: over each disjoint window the
candidate models are scored by RMSE, every candidate within ``epsilon_rel`` of
the best is admissible, and the admissible candidate with the lowest overhead
rank becomes the label.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, HydraError, MissingColumnError, ModelFormatError
from .stats import N_FEATURES, FeatureVector, NormalizationStats, rmse
from .trace import ServerProfile, Trace


@dataclass(frozen=True)
class CandidateSpec:
    candidate_id: str
    overhead_rank: int

    def __post_init__(self):
        if self.overhead_rank < 0:
            raise ValueError("overhead_rank must be >= 0")


@dataclass(frozen=True)
class SelectorExample:
    features: FeatureVector
    label: str


def check_candidates(specs: Sequence[CandidateSpec]) -> None:
    ids = [s.candidate_id for s in specs]
    ranks = [s.overhead_rank for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"duplicate candidate ids: {ids}")
    if len(set(ranks)) != len(ranks):
        raise ConfigurationError(f"overhead ranks must be unique: {ranks}")


def lightest_adequate(rmses: Sequence[float], specs: Sequence[CandidateSpec], epsilon_rel: float) -> str:
    """Cheapest candidate whose RMSE is within (1 + epsilon_rel) of the best."""
    best = min(rmses)
    bound = (1.0 + epsilon_rel) * best
    admissible = [s for s, r in zip(specs, rmses) if r <= bound]
    return min(admissible, key=lambda s: s.overhead_rank).candidate_id


def label_windows(
    trace: Trace,
    candidates: Sequence[tuple],
    profile: ServerProfile,
    norm: NormalizationStats,
    window: int = 30,
    epsilon_rel: float = 0.05,
) -> list:
    """One ``SelectorExample`` per disjoint window, featurized by the window's midpoint sample.

    ``candidates`` holds ``(CandidateSpec, predictor)`` pairs; a predictor
    exposes ``predict_trace_watts(trace, profile)``.
    """
    if not trace.has_power():
        raise MissingColumnError("label_windows needs measured_power_watts on every sample")
    if window < 1 or len(trace) < window:
        raise HydraError(f"trace of {len(trace)} samples is shorter than window={window}")
    if not candidates:
        raise ConfigurationError("no candidate models")
    specs = [spec for spec, _ in candidates]
    check_candidates(specs)
    actual = trace.column("measured_power_watts")
    preds = [np.asarray(model.predict_trace_watts(trace, profile), dtype=float) for _, model in candidates]
    Xn = norm.transform(trace.feature_matrix)
    examples = []
    for start in range(0, len(trace) - window + 1, window):
        sl = slice(start, start + window)
        scores = [rmse(p[sl], actual[sl]) for p in preds]
        label = lightest_adequate(scores, specs, epsilon_rel)
        examples.append(SelectorExample(FeatureVector(Xn[start + window // 2], True), label))
    return examples


def gini(class_counts) -> float:
    counts = np.asarray(class_counts, dtype=float)
    total = counts.sum()
    if total <= 0:
        raise ValueError("gini of an empty node")
    p = counts / total
    return float(1.0 - p @ p)


# ---------------------------------------------------------------------------
# Decision tree
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DecisionTree:
    """Flat node arrays in preorder. Leaves have ``feature == -1`` and a counts row;
    internal nodes send ``x[feature] <= threshold`` to ``left``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # (n_nodes, n_classes); rows of internal nodes are zero

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depths[self.left[i]] = depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    def leaf(self, x) -> int:
        node = 0
        while self.feature[node] >= 0:
            node = self.left[node] if x[self.feature[node]] <= self.threshold[node] else self.right[node]
        return node

    def predict_index(self, x) -> int:
        return int(np.argmax(self.counts[self.leaf(x)]))

    def __eq__(self, other):
        if not isinstance(other, DecisionTree):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("feature", "threshold", "left", "right", "counts")
        )

    __hash__ = None

    def to_doc(self) -> dict:
        leaf = self.feature < 0
        return {
            "feature": self.feature.tolist(),
            "threshold": [0.0 if lf else float(t) for lf, t in zip(leaf, self.threshold)],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "counts": [row.tolist() if lf else None for lf, row in zip(leaf, self.counts)],
        }

    @classmethod
    def from_doc(cls, doc: dict, n_classes: int) -> "DecisionTree":
        feature = np.array(doc["feature"], dtype=int)
        n = len(feature)
        counts = np.zeros((n, n_classes), dtype=int)
        for i, row in enumerate(doc["counts"]):
            if row is not None:
                if len(row) != n_classes:
                    raise ModelFormatError(f"leaf {i} has {len(row)} class counts, expected {n_classes}")
                counts[i] = row
        tree = cls(
            feature,
            np.array(doc["threshold"], dtype=float),
            np.array(doc["left"], dtype=int),
            np.array(doc["right"], dtype=int),
            counts,
        )
        tree.validate(n_classes)
        return tree

    def validate(self, n_classes: int) -> None:
        n = self.n_nodes
        if not (len(self.threshold) == len(self.left) == len(self.right) == n) or n == 0:
            raise ModelFormatError("tree node arrays have inconsistent lengths")
        reached = np.zeros(n, dtype=bool)
        reached[0] = True
        for i in range(n):
            if self.feature[i] >= 0:
                if self.feature[i] >= N_FEATURES:
                    raise ModelFormatError(f"node {i} splits on feature {self.feature[i]}")
                for child in (self.left[i], self.right[i]):
                    if not i < child < n:
                        raise ModelFormatError(f"node {i} has invalid child {child}")
                    reached[child] = True
            elif self.counts[i].sum() <= 0 or np.any(self.counts[i] < 0):
                raise ModelFormatError(f"leaf {i} has invalid class counts")
        if not reached.all():
            raise ModelFormatError("tree has unreachable nodes")


_TIE_TOL = 1e-12


def _best_split(X, y, n_classes, features):
    """(feature, threshold) minimizing weighted child Gini, or None if no feature varies."""
    n = len(y)
    onehot = np.eye(n_classes)[y]
    best = None
    for f in features:
        vals = X[:, f]
        order = np.argsort(vals, kind="stable")
        sv = vals[order]
        distinct = sv[:-1] < sv[1:]
        if not distinct.any():
            continue
        left = np.cumsum(onehot[order], axis=0)[:-1]
        right = left[-1] + onehot[order[-1]] - left
        n_left = np.arange(1, n, dtype=float)
        n_right = n - n_left
        # n * weighted Gini = n_l - sum(c_l^2)/n_l + n_r - sum(c_r^2)/n_r
        impurity = (n_left - (left * left).sum(axis=1) / n_left) + (n_right - (right * right).sum(axis=1) / n_right)
        impurity = np.where(distinct, impurity, np.inf)
        # equal impurities can differ in the last bits; treat those as ties
        # so the lowest feature, then the lowest threshold, wins
        i = int(np.argmax(impurity <= impurity.min() + _TIE_TOL * n))
        score = impurity[i]
        if best is None or score < best[0] - _TIE_TOL * n:
            lo, hi = sv[i], sv[i + 1]
            thr = 0.5 * (lo + hi)
            if not lo <= thr < hi:
                thr = lo
            best = (score, f, thr)
    return None if best is None else (best[1], best[2])


def train_tree(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    max_depth: int = 12,
    min_samples_split: int = 2,
    feature_subsample_k: int = N_FEATURES,
    rng: Optional[np.random.Generator] = None,
) -> DecisionTree:
    """CART classification tree on integer labels ``y`` in ``range(n_classes)``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if len(y) == 0:
        raise HydraError("cannot train a tree on zero examples")
    k = feature_subsample_k
    if not 1 <= k <= X.shape[1]:
        raise ConfigurationError(f"feature_subsample_k={k} out of range")
    rng = rng if rng is not None else np.random.default_rng(0)

    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.zeros(n_classes, dtype=int))
        return len(feature) - 1

    def grow(idx, depth):
        node = new_node()
        node_counts = np.bincount(y[idx], minlength=n_classes)
        pure = np.count_nonzero(node_counts) <= 1
        if pure or depth >= max_depth or len(idx) < min_samples_split:
            counts[node] = node_counts
            return node
        if k == X.shape[1]:
            feats = range(X.shape[1])
        else:
            feats = np.sort(rng.choice(X.shape[1], size=k, replace=False))
        split = _best_split(X[idx], y[idx], n_classes, feats)
        if split is None:
            counts[node] = node_counts
            return node
        f, thr = split
        go_left = X[idx, f] <= thr
        feature[node] = int(f)
        threshold[node] = float(thr)
        left[node] = grow(idx[go_left], depth + 1)
        right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(np.arange(len(y)), 0)
    return DecisionTree(
        np.array(feature, dtype=int),
        np.array(threshold, dtype=float),
        np.array(left, dtype=int),
        np.array(right, dtype=int),
        np.array(counts, dtype=int),
    )


# ---------------------------------------------------------------------------
# Forest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 12
    min_samples_split: int = 2
    feature_subsample_k: int = math.ceil(math.sqrt(N_FEATURES))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_samples_split < 1:
            raise ConfigurationError("n_trees, max_depth and min_samples_split must be positive")
        if not 1 <= self.feature_subsample_k <= N_FEATURES:
            raise ConfigurationError(f"feature_subsample_k must be within [1, {N_FEATURES}]")


@dataclass(frozen=True, eq=False)
class SelectorForest:
    trees: tuple
    candidate_ids: tuple  # class order; ties go to the earliest id
    feature_subsample_k: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        object.__setattr__(self, "candidate_ids", tuple(self.candidate_ids))
        if not self.trees:
            raise ConfigurationError("a forest needs at least one tree")
        if not 1 <= self.feature_subsample_k <= N_FEATURES:
            raise ConfigurationError(f"feature_subsample_k must be within [1, {N_FEATURES}]")
        # One node table for all trees. Leaves point to themselves on both
        # sides, so iterating ``depth`` hops from the roots lands every tree on
        # its leaf.
        feats, thrs, lefts, rights, votes, roots = [], [], [], [], [], []
        offset = 0
        for t in self.trees:
            leaf = t.feature < 0
            local = np.arange(t.n_nodes) + offset
            feats.append(np.where(leaf, 0, t.feature))
            thrs.append(np.where(leaf, np.inf, t.threshold))
            lefts.append(np.where(leaf, local, t.left + offset))
            rights.append(np.where(leaf, local, t.right + offset))
            votes.append(np.argmax(t.counts, axis=1))
            roots.append(offset)
            offset += t.n_nodes
        tables = dict(
            _feat=np.concatenate(feats),
            _thr=np.concatenate(thrs),
            _left=np.concatenate(lefts),
            _right=np.concatenate(rights),
            _vote=np.concatenate(votes),
            _roots=np.array(roots),
            _depth=max(t.depth for t in self.trees),
        )
        for name, value in tables.items():
            object.__setattr__(self, name, value)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def __eq__(self, other):
        if not isinstance(other, SelectorForest):
            return NotImplemented
        return (
            self.candidate_ids == other.candidate_ids
            and self.feature_subsample_k == other.feature_subsample_k
            and self.seed == other.seed
            and self.trees == other.trees
        )

    __hash__ = None

    def votes(self, x: np.ndarray) -> np.ndarray:
        """Vote counts per candidate for one normalized feature row."""
        # next node of every node under x, then hop from the roots
        step = np.where(x[self._feat] > self._thr, self._right, self._left)
        node = self._roots
        for _ in range(self._depth):
            node = step[node]
        return np.bincount(self._vote[node], minlength=len(self.candidate_ids))

    def predict_index_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        out = np.empty(len(X), dtype=int)
        for i, x in enumerate(X):
            out[i] = int(np.argmax(self.votes(x)))
        return out

    def to_doc(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "feature_subsample_k": self.feature_subsample_k,
            "candidate_ids": list(self.candidate_ids),
            "seed": self.seed,
            "trees": [t.to_doc() for t in self.trees],
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "SelectorForest":
        try:
            ids = tuple(doc["candidate_ids"])
            trees = tuple(DecisionTree.from_doc(t, len(ids)) for t in doc["trees"])
            if "n_trees" in doc and doc["n_trees"] != len(trees):
                raise ModelFormatError(f"n_trees={doc['n_trees']} but {len(trees)} trees stored")
            return cls(trees, ids, int(doc["feature_subsample_k"]), int(doc["seed"]))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ModelFormatError):
                raise
            raise ModelFormatError(f"malformed forest: {exc}") from None


def train_forest(
    data: Sequence[SelectorExample],
    config: ForestConfig = ForestConfig(),
    candidate_ids: Optional[Sequence[str]] = None,
) -> SelectorForest:
    """Bagged CART trees.

    ``candidate_ids`` fixes the class order (pass it sorted by overhead rank so
    vote ties favour the cheaper model); by default the sorted label set.
    Tree ``i`` draws its bootstrap sample and split features from a stream
    seeded by ``(config.seed, i)``.
    """
    if not data:
        raise HydraError("cannot train a forest on zero examples")
    ids = tuple(candidate_ids) if candidate_ids is not None else tuple(sorted({ex.label for ex in data}))
    index = {cid: i for i, cid in enumerate(ids)}
    try:
        y = np.array([index[ex.label] for ex in data], dtype=int)
    except KeyError as exc:
        raise ConfigurationError(f"label {exc.args[0]!r} is not a known candidate id") from None
    X = np.array([ex.features.values for ex in data], dtype=float)
    n = len(y)
    trees = []
    for t in range(config.n_trees):
        rng = np.random.default_rng([config.seed, t])
        rows = rng.integers(0, n, n) if config.bootstrap else np.arange(n)
        trees.append(
            train_tree(X[rows], y[rows], len(ids), config.max_depth, config.min_samples_split,
                       config.feature_subsample_k, rng)
        )
    return SelectorForest(tuple(trees), ids, config.feature_subsample_k, config.seed)


def forest_predict(forest: SelectorForest, fv: FeatureVector) -> tuple:
    """Majority vote. Returns ``(candidate_id, vote_counts)``; ties go to the earlier candidate id."""
    votes = forest.votes(fv.values)
    return forest.candidate_ids[int(np.argmax(votes))], tuple(votes.tolist())


def examples_to_csv(examples: Sequence[SelectorExample]) -> str:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"f{i}" for i in range(N_FEATURES)] + ["label"])
    for ex in examples:
        w.writerow([repr(float(v)) for v in ex.features.values] + [ex.label])
    return buf.getvalue()
