"""Control quantization and a random-forest classifier over measurement windows.

Trees are grown best-first: the open leaf whose best split gives the largest
Gini impurity decrease is expanded next, until ``max_leaf_nodes`` leaves
exist or no leaf can be split. Each split looks at a fresh random subset of
features; thresholds are midpoints between adjacent distinct values and
samples with ``x[f] <= threshold`` go left.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import asdict, dataclass, field

import numba as nb
import numpy as np

from .dynamics import U_MAX, U_MIN
from .errors import ConfigError, DomainError, FormatError

N_CLASSES = 3
MODEL_FORMAT = "mpcdistill.forest"
MODEL_VERSION = "1.0"


@dataclass(frozen=True)
class LabelScheme:
    thresholds: tuple[float, float] = (0.075, 0.14)
    control_levels: tuple[float, float, float] = (0.049, 0.11, 0.449)
    u_min: float = U_MIN
    u_max: float = U_MAX

    def __post_init__(self):
        t1, t2 = self.thresholds
        c1, c2, c3 = self.control_levels
        if not (t1 < t2 and c1 <= t1 < c2 <= t2 < c3):
            raise ConfigError(
                f"label scheme needs levels[0] <= t1 < levels[1] <= t2 < levels[2]; "
                f"got thresholds={self.thresholds}, levels={self.control_levels}"
            )
        object.__setattr__(self, "thresholds", (float(t1), float(t2)))
        object.__setattr__(self, "control_levels", (float(c1), float(c2), float(c3)))


DEFAULT_SCHEME = LabelScheme()


def quantize_label(u: float, scheme: LabelScheme = DEFAULT_SCHEME) -> int:
    if not scheme.u_min <= u <= scheme.u_max:
        raise DomainError(f"control {u!r} outside [{scheme.u_min}, {scheme.u_max}]")
    t1, t2 = scheme.thresholds
    if u <= t1:
        return 1
    if u <= t2:
        return 2
    return 3


def quantize_labels(u, scheme: LabelScheme = DEFAULT_SCHEME) -> np.ndarray:
    """Vectorized :func:`quantize_label`."""
    u = np.asarray(u, dtype=float)
    if u.size and (u.min() < scheme.u_min or u.max() > scheme.u_max):
        raise DomainError(f"controls outside [{scheme.u_min}, {scheme.u_max}]")
    t1, t2 = scheme.thresholds
    return np.where(u <= t1, 1, np.where(u <= t2, 2, 3)).astype(np.int64)


def label_to_control(label: int, scheme: LabelScheme = DEFAULT_SCHEME) -> float:
    if label not in (1, 2, 3):
        raise ValueError(f"label must be 1, 2 or 3, got {label!r}")
    return scheme.control_levels[label - 1]


def train_test_split(dataset, test_ratio: float = 0.33, seed: int = 0):
    """Random partition into ``(train, test)``; the test part has ``floor(n * ratio)`` samples.

    ``dataset`` needs ``len()`` and ``subset(indices)``.
    """
    if not 0 < test_ratio < 1:
        raise ValueError(f"test_ratio must be in (0, 1), got {test_ratio}")
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    n_test = int(math.floor(n * test_ratio))
    if n_test == 0 or n_test == n:
        raise ValueError(f"split of {n} samples at ratio {test_ratio} leaves an empty part")
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return dataset.subset(train_idx), dataset.subset(test_idx)


# ---------------------------------------------------------------------------
# forest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_leaf_nodes: int = 500
    feature_subset_size: int | None = None  # None: ceil(sqrt(n_features))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError(f"learner.n_trees must be >= 1, got {self.n_trees}")
        if self.max_leaf_nodes < 2:
            raise ConfigError(f"learner.max_leaf_nodes must be >= 2, got {self.max_leaf_nodes}")
        if self.feature_subset_size is not None and self.feature_subset_size < 1:
            raise ConfigError("learner.feature_subset_size must be >= 1")

    def subset_size(self, n_features: int) -> int:
        k = self.feature_subset_size or math.ceil(math.sqrt(n_features))
        return min(k, n_features)


@dataclass
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=float),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            counts=np.asarray(d["counts"], dtype=np.int64).reshape(-1, N_CLASSES),
        )


@dataclass
class ForestModel:
    trees: list[Tree]
    config: ForestConfig
    n_features: int
    _packed: tuple | None = field(default=None, repr=False, compare=False)

    def packed(self) -> tuple:
        """Concatenated node arrays for compiled prediction."""
        if self._packed is None:
            offsets = np.cumsum([0] + [len(t.feature) for t in self.trees])
            feature = np.concatenate([t.feature for t in self.trees])
            threshold = np.concatenate([t.threshold for t in self.trees])
            left = np.concatenate([t.left + o for t, o in zip(self.trees, offsets)])
            right = np.concatenate([t.right + o for t, o in zip(self.trees, offsets)])
            # argmax picks the first maximum, i.e. the smaller label on ties
            vote = np.concatenate([np.argmax(t.counts, axis=1) for t in self.trees]).astype(np.int64)
            self._packed = (offsets[:-1].astype(np.int64), feature, threshold, left, right, vote)
        return self._packed

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "config": asdict(self.config),
            "n_features": self.n_features,
            "classes": [1, 2, 3],
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        if d.get("format") != MODEL_FORMAT:
            raise FormatError(f"not a forest model file (format={d.get('format')!r})")
        major = str(d.get("version", "")).split(".")[0]
        if major != MODEL_VERSION.split(".")[0]:
            raise FormatError(f"unsupported forest model version {d.get('version')!r}")
        return cls(
            trees=[Tree.from_dict(t) for t in d["trees"]],
            config=ForestConfig(**d["config"]),
            n_features=int(d["n_features"]),
        )


def save_model(model: ForestModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, separators=(",", ":"))
        fh.write("\n")


def load_model(path) -> ForestModel:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return ForestModel.from_dict(data)


def _best_split(X, y, idx, features):
    """Best Gini split of samples ``idx`` over ``features``; None if no valid split."""
    n = idx.size
    best = None
    ys = y[idx]
    parent = np.bincount(ys, minlength=N_CLASSES)
    parent_impurity = n - np.dot(parent, parent) / n  # n * gini
    for f in features:
        v = X[idx, f]
        order = np.argsort(v, kind="stable")
        vs = v[order]
        valid = vs[:-1] < vs[1:]
        if not valid.any():
            continue
        onehot = np.zeros((n, N_CLASSES))
        onehot[np.arange(n), ys[order]] = 1.0
        cl = np.cumsum(onehot, axis=0)[:-1]
        cr = parent - cl
        nl = np.arange(1, n, dtype=float)
        nr = n - nl
        weighted = (nl - np.einsum("ij,ij->i", cl, cl) / nl) + (nr - np.einsum("ij,ij->i", cr, cr) / nr)
        weighted = np.where(valid, weighted, np.inf)
        pos = int(np.argmin(weighted))
        gain = parent_impurity - weighted[pos]
        if best is None or gain > best[0]:
            lo, hi = vs[pos], vs[pos + 1]
            thr = 0.5 * (lo + hi)
            if not lo <= thr < hi:
                thr = lo
            best = (gain, int(f), float(thr))
    return best


def _grow_tree(X, y, rng, max_leaf_nodes, n_sub, bootstrap) -> Tree:
    n, d = X.shape
    idx = np.sort(rng.integers(0, n, n)) if bootstrap else np.arange(n)
    feature, threshold, left, right, counts = [], [], [], [], []
    members = {}
    heap = []

    def add_node(sample_idx):
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        c = np.bincount(y[sample_idx], minlength=N_CLASSES)
        counts.append(c)
        if sample_idx.size >= 2 and np.count_nonzero(c) > 1:
            feats = rng.choice(d, size=n_sub, replace=False)
            split = _best_split(X, y, sample_idx, feats)
            if split is not None and split[0] >= 0:
                members[node] = (sample_idx, split)
                heapq.heappush(heap, (-split[0], node))
        return node

    add_node(idx)
    n_leaves = 1
    while heap and n_leaves < max_leaf_nodes:
        _, node = heapq.heappop(heap)
        sample_idx, (_, f, thr) = members.pop(node)
        go_left = X[sample_idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        left[node] = add_node(sample_idx[go_left])
        right[node] = add_node(sample_idx[~go_left])
        n_leaves += 1
    return Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        counts=np.asarray(counts, dtype=np.int64).reshape(-1, N_CLASSES),
    )


def fit_forest(X, labels, cfg: ForestConfig = ForestConfig()) -> ForestModel:
    """Train on feature rows ``X`` and labels in {1, 2, 3}."""
    X = np.ascontiguousarray(X, dtype=float)
    labels = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training data must be a non-empty 2-D array")
    if labels.shape != (X.shape[0],):
        raise ValueError("one label per training row required")
    if not np.isin(labels, (1, 2, 3)).all():
        raise ValueError("labels must be in {1, 2, 3}")
    y = labels.astype(np.int64) - 1
    n_sub = cfg.subset_size(X.shape[1])
    trees = []
    for t in range(cfg.n_trees):
        rng = np.random.default_rng([cfg.seed, t])
        trees.append(_grow_tree(X, y, rng, cfg.max_leaf_nodes, n_sub, cfg.bootstrap))
    return ForestModel(trees=trees, config=cfg, n_features=X.shape[1])


def train_forest(train, cfg: ForestConfig = ForestConfig()) -> ForestModel:
    """Train on a dataset exposing ``windows`` and ``labels`` arrays."""
    return fit_forest(train.windows, train.labels, cfg)


@nb.njit(cache=True)
def _predict_packed(X, roots, feature, threshold, left, right, vote):
    out = np.empty(X.shape[0], dtype=np.int64)
    tally = np.zeros(N_CLASSES, dtype=np.int64)
    for i in range(X.shape[0]):
        tally[:] = 0
        for r in roots:
            node = r
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            tally[vote[node]] += 1
        best = 0
        for c in range(1, N_CLASSES):
            if tally[c] > tally[best]:
                best = c
        out[i] = best + 1
    return out


def predict_many(model: ForestModel, X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected rows of length {model.n_features}, got shape {X.shape}")
    return _predict_packed(X, *model.packed())


def predict(model: ForestModel, window) -> int:
    """Majority vote of the trees; ties go to the smaller label."""
    window = np.asarray(window, dtype=float).reshape(1, -1)
    return int(predict_many(model, window)[0])


@dataclass
class ConfusionMatrix:
    """Rows are true labels 1..3, columns predicted labels 1..3."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total)

    def to_dict(self) -> dict:
        return {"counts": self.counts.tolist(), "accuracy": self.accuracy, "total": self.total}


def confusion(model: ForestModel, X, labels) -> ConfusionMatrix:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("confusion matrix needs at least one sample")
    pred = predict_many(model, X)
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(counts, (labels - 1, pred - 1), 1)
    return ConfusionMatrix(counts)
