"""Random-forest baseline on hard anchors, family importance and the ridge probe.

Tree growing runs in the compiled ``_kernels`` extension when it is built,
otherwise in ``_fallback``.  Set ``TCNET_PURE_PYTHON=1`` to force the
fallback; both produce identical trees.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from ..anchors import FAMILIES, ExtractorParams, FamilyLayout, extract_all
from ..io import FormatError, atomic_write
from . import _fallback

if os.environ.get("TCNET_PURE_PYTHON", "") not in ("", "0"):
    _kernels = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels
        BACKEND = "compiled"
    except ImportError:  # extension not built
        _kernels = _fallback
        BACKEND = "python"


def backend(name: str | None = None):
    """Kernel module by name ('compiled' or 'python'); default is the active one."""
    if name is None:
        return _kernels
    if name == "python":
        return _fallback
    if name == "compiled":
        from . import _kernels as compiled
        return compiled
    raise ValueError(f"forest backend must be 'compiled' or 'python', got {name!r}")


# -- features ----------------------------------------------------------------

def extract_rf_features(windows, block_sizes, params: ExtractorParams, batch: int = 256) -> np.ndarray:
    """Hard anchors per non-overlapping block, averaged over blocks, scales concatenated.

    ``windows`` is (n, C, L); the result is (n, len(block_sizes) * C * D),
    channel-major within each scale.
    """
    from ..model import unfold_blocks

    x = np.asarray(windows, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"rf features: expected (n, C, L) windows, got shape {x.shape}")
    per_scale = []
    for m in block_sizes:
        chunks = []
        for i in range(0, len(x), batch):
            z = extract_all(unfold_blocks(x[i:i + batch], m, m), params, mode="hard").values.data
            chunks.append(z.mean(axis=1).reshape(z.shape[0], -1))
        per_scale.append(np.concatenate(chunks, axis=0))
    return np.concatenate(per_scale, axis=1)


def rf_column_families(layouts, n_channels: int) -> list[str]:
    """Family name for every column produced by :func:`extract_rf_features`."""
    if isinstance(layouts, FamilyLayout):
        layouts = [layouts]
    names = []
    for layout in layouts:
        per_feature = [layout.names[i] for i in layout.family_index()]
        names.extend(per_feature * n_channels)
    return names


# -- forest ------------------------------------------------------------------

@dataclass
class ForestConfig:
    n_trees: int = 300
    max_depth: int = 20
    class_weight: str = "balanced"
    seed: int = 0
    max_features: int | None = None
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError(f"forest: n_trees must be >= 1, got {self.n_trees}")
        if self.max_depth < 1:
            raise ValueError(f"forest: max_depth must be >= 1, got {self.max_depth}")
        if self.class_weight not in ("balanced", "none"):
            raise ValueError(f"forest: class_weight must be 'balanced' or 'none', got {self.class_weight!r}")


@dataclass
class DecisionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def as_tuple(self):
        return (self.feature, self.threshold, self.left, self.right, self.value)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for node in range(self.n_nodes):
            if self.feature[node] >= 0:
                depth[self.left[node]] = depth[self.right[node]] = depth[node] + 1
        return int(depth.max())


@dataclass
class Forest:
    config: ForestConfig
    n_features: int
    n_classes: int
    trees: list[DecisionTree]
    importances: np.ndarray
    class_weight: np.ndarray
    oob_score: float | None = None
    extra: dict = field(default_factory=dict)


def balanced_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    safe = np.where(counts > 0, counts, 1.0)
    return np.where(counts > 0, len(labels) / (n_classes * safe), 0.0)


def tree_seeds(seed: int, n_trees: int):
    """Per-tree (bootstrap generator, splitmix seed) pairs, independent of build order."""
    children = np.random.SeedSequence(seed).spawn(n_trees)
    return [(np.random.default_rng(child), int(child.generate_state(1, np.uint64)[0])) for child in children]


def fit_forest(features, labels, cfg: ForestConfig | None = None, n_classes: int | None = None,
               kernels=None) -> Forest:
    cfg = cfg or ForestConfig()
    kernels = kernels or _kernels
    X = np.ascontiguousarray(features, dtype=np.float64)
    y = np.ascontiguousarray(labels, dtype=np.int32)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError(f"forest: features {X.shape} and labels {y.shape} do not align")
    if not np.all(np.isfinite(X)):
        raise ValueError("forest: features contain non-finite values")
    n_classes = n_classes or int(y.max()) + 1
    if len(np.unique(y)) < 2:
        raise ValueError("forest: training labels contain a single class")
    n, d = X.shape
    max_features = cfg.max_features or max(1, math.isqrt(d))
    weights = balanced_weights(y, n_classes) if cfg.class_weight == "balanced" else np.ones(n_classes)

    trees, importance = [], np.zeros(d)
    oob_votes = np.zeros((n, n_classes))
    for boot_rng, split_seed in tree_seeds(cfg.seed, cfg.n_trees):
        if cfg.bootstrap:
            counts = np.bincount(boot_rng.integers(0, n, size=n), minlength=n).astype(np.int64)
        else:
            counts = np.ones(n, dtype=np.int64)
        feat, thr, left, right, value, imp = kernels.build_tree(
            X, y, counts, weights, n_classes, cfg.max_depth, max_features, np.uint64(split_seed))
        tree = DecisionTree(feat, thr, left, right, value)
        trees.append(tree)
        if imp.sum() > 0:
            importance += imp / imp.sum()
        out = counts == 0
        if out.any():
            oob_votes[out] += kernels.predict_trees(X[out], [tree.as_tuple()], n_classes)
    importance = importance / cfg.n_trees
    has_vote = oob_votes.sum(axis=1) > 0
    oob = float(np.mean(np.argmax(oob_votes[has_vote], axis=1) == y[has_vote])) if has_vote.any() else None
    return Forest(cfg, d, n_classes, trees, importance, weights, oob)


def predict_proba(forest: Forest, features, kernels=None) -> np.ndarray:
    kernels = kernels or _kernels
    X = np.ascontiguousarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != forest.n_features:
        raise ValueError(f"forest: expected {forest.n_features} feature columns, got shape {X.shape}")
    total = kernels.predict_trees(X, [t.as_tuple() for t in forest.trees], forest.n_classes)
    return total / len(forest.trees)


def predict_forest(forest: Forest, features, kernels=None) -> tuple[np.ndarray, np.ndarray]:
    """(classes, probabilities); ties go to the lowest class index."""
    proba = predict_proba(forest, features, kernels)
    return np.argmax(proba, axis=1), proba


def family_importance(forest: Forest, families) -> dict[str, float]:
    """Impurity-decrease importance summed within families and normalized.

    ``families`` is a per-column list of family names, or a layout (or list of
    layouts) whose width tiles the feature columns.
    """
    if isinstance(families, FamilyLayout) or (families and isinstance(families[0], FamilyLayout)):
        layouts = [families] if isinstance(families, FamilyLayout) else list(families)
        width = sum(layout.width for layout in layouts)
        if forest.n_features % width:
            raise ValueError(f"family importance: {forest.n_features} columns do not tile layouts of width {width}")
        families = rf_column_families(layouts, forest.n_features // width)
    if len(families) != forest.n_features:
        raise ValueError(f"family importance: {len(families)} names for {forest.n_features} columns")
    shares: dict[str, float] = {}
    for name, value in zip(families, forest.importances):
        shares[name] = shares.get(name, 0.0) + float(value)
    total = sum(shares.values())
    if total <= 0:
        return {k: 1.0 / len(shares) for k in shares}
    return {k: v / total for k, v in shares.items()}


# -- serialization -----------------------------------------------------------

FOREST_MAGIC = b"TCRF"
FOREST_VERSION = 1
_DTYPES = {b"i": "<i4", b"f": "<f8"}


def forest_bytes(forest: Forest) -> bytes:
    """Magic, version, JSON header, then typed array records (int32 or float64)."""
    meta = json.dumps({"config": asdict(forest.config), "n_features": forest.n_features,
                       "n_classes": forest.n_classes, "oob_score": forest.oob_score},
                      sort_keys=True).encode("utf-8")
    records = {"importances": forest.importances, "class_weight": forest.class_weight}
    for i, tree in enumerate(forest.trees):
        for key, arr in zip(("feature", "threshold", "left", "right", "value"), tree.as_tuple()):
            records[f"tree{i}.{key}"] = arr
    parts = [FOREST_MAGIC, np.uint32(FOREST_VERSION).tobytes(), np.uint32(len(meta)).tobytes(), meta,
             np.uint32(len(records)).tobytes()]
    for name, arr in records.items():
        arr = np.asarray(arr)
        tag = b"i" if arr.dtype.kind in "iu" else b"f"
        key = name.encode("utf-8")
        parts += [np.uint32(len(key)).tobytes(), key, tag, np.uint32(arr.ndim).tobytes(),
                  np.asarray(arr.shape, dtype="<u4").tobytes(),
                  np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()]
    return b"".join(parts)


def save_forest(forest: Forest, path: str) -> None:
    data = forest_bytes(forest)
    atomic_write(path, lambda fh: fh.write(data))


def forest_from_bytes(data: bytes) -> Forest:
    buf = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("truncated payload", f"forest file ends at byte {len(buf)}, needed {pos + n}")
        out = bytes(buf[pos:pos + n])
        pos += n
        return out

    def u32():
        return int(np.frombuffer(take(4), "<u4")[0])

    if bytes(buf[:4]) != FOREST_MAGIC:
        raise FormatError("unrecognized format", "not a forest file (bad magic)")
    pos = 4
    version = u32()
    if version != FOREST_VERSION:
        raise FormatError("version mismatch", f"forest file version {version}, expected {FOREST_VERSION}")
    meta = json.loads(take(u32()).decode("utf-8"))
    records = {}
    for _ in range(u32()):
        name = take(u32()).decode("utf-8")
        tag = take(1)
        if tag not in _DTYPES:
            raise FormatError("corrupt header", f"unknown record type {tag!r}")
        shape = tuple(int(v) for v in np.frombuffer(take(4 * u32()), "<u4"))
        dtype = np.dtype(_DTYPES[tag])
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(dtype.itemsize * n), dtype).reshape(shape)
        records[name] = arr.astype(np.int32 if tag == b"i" else np.float64)
    if pos != len(buf):
        raise FormatError("corrupt header", "trailing bytes after last record")
    cfg = ForestConfig(**meta["config"])
    trees = [DecisionTree(*(records[f"tree{i}.{k}"] for k in ("feature", "threshold", "left", "right", "value")))
             for i in range(cfg.n_trees)]
    return Forest(cfg, meta["n_features"], meta["n_classes"], trees, records["importances"],
                  records["class_weight"], meta["oob_score"])


def load_forest(path: str) -> Forest:
    with open(path, "rb") as fh:
        return forest_from_bytes(fh.read())


# -- ridge probe -------------------------------------------------------------

# Six reporting families; the shape family is folded into statistics.
PROBE_FAMILIES = {
    "filterbank": "Filterbank",
    "spectral": "Spectral",
    "statistics": "Statistics",
    "shape": "Statistics",
    "crossing": "Crossing",
    "quantiles": "Quantiles",
    "autocorr": "Autocorrelation",
}


@dataclass
class RidgeModel:
    weight: np.ndarray
    intercept: np.ndarray
    lam: float
    x_mean: np.ndarray
    x_scale: np.ndarray

    def predict(self, X) -> np.ndarray:
        return ((np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_scale) @ self.weight + self.intercept


def fit_ridge(X, Y, lam: float = 1.0) -> RidgeModel:
    """Closed-form ridge on inputs standardized with these rows' statistics."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if lam < 0:
        raise ValueError(f"ridge: regularization must be >= 0, got {lam}")
    mean = X.mean(axis=0)
    spread = X.std(axis=0)
    spread = np.where(spread > 0, spread, 1.0)
    Xs = (X - mean) / spread
    y_mean = Y.mean(axis=0)
    gram = Xs.T @ Xs + lam * np.eye(X.shape[1])
    if lam == 0 and np.linalg.matrix_rank(gram) < X.shape[1]:
        raise ValueError("ridge: singular system (collinear inputs with zero regularization)")
    weight = np.linalg.solve(gram, Xs.T @ (Y - y_mean))
    return RidgeModel(weight, y_mean, lam, mean, spread)


def r_squared(Y, pred) -> np.ndarray:
    """Per-column 1 - SS_res / SS_tot around the column's own mean."""
    Y = np.asarray(Y, dtype=np.float64)
    ss_res = np.sum((Y - pred) ** 2, axis=0)
    ss_tot = np.sum((Y - Y.mean(axis=0)) ** 2, axis=0)
    return 1.0 - ss_res / ss_tot


@dataclass
class ProbeReport:
    r2_train: dict[str, float]
    r2_test: dict[str, float]
    excluded: list[int]

    def rows(self):
        return [(f, self.r2_train[f], self.r2_test[f]) for f in self.r2_test]


def ridge_probe(X_train, Y_train, X_test, Y_test, lam: float = 1.0, families=None) -> ProbeReport:
    """Ridge from embeddings to targets; R² averaged within each target family.

    ``families`` names the family of every target column (defaults to one
    family per column).  Columns constant on either split are excluded.
    """
    Y_train = np.asarray(Y_train, dtype=np.float64)
    Y_test = np.asarray(Y_test, dtype=np.float64)
    if Y_train.ndim == 1:
        Y_train, Y_test = Y_train[:, None], Y_test[:, None]
    if len(Y_test) < 2:
        raise ValueError("ridge probe: need at least 2 test rows")
    families = list(families) if families is not None else [f"target{j}" for j in range(Y_train.shape[1])]
    if len(families) != Y_train.shape[1]:
        raise ValueError(f"ridge probe: {len(families)} family names for {Y_train.shape[1]} target columns")
    keep = (np.ptp(Y_train, axis=0) > 0) & (np.ptp(Y_test, axis=0) > 0)
    if not keep.any():
        raise ValueError("ridge probe: every target column is constant")
    model = fit_ridge(X_train, Y_train[:, keep], lam)
    r2_train = r_squared(Y_train[:, keep], model.predict(X_train))
    r2_test = r_squared(Y_test[:, keep], model.predict(X_test))
    kept = [f for f, k in zip(families, keep) if k]
    out_train, out_test = {}, {}
    for name in dict.fromkeys(kept):
        cols = [i for i, f in enumerate(kept) if f == name]
        out_train[name] = float(np.mean(r2_train[cols]))
        out_test[name] = float(np.mean(r2_test[cols]))
    return ProbeReport(out_train, out_test, [int(j) for j in np.flatnonzero(~keep)])


def probe_target_families(layout: FamilyLayout, n_channels: int) -> list[str]:
    return [PROBE_FAMILIES[name] for name in rf_column_families(layout, n_channels)]


def write_probe_csv(path: str, report: ProbeReport) -> None:
    def write(fh):
        writer = csv.writer(fh)
        writer.writerow(["family", "r2_train", "r2_test"])
        for family, train, test in report.rows():
            writer.writerow([family, f"{train:.10g}", f"{test:.10g}"])

    atomic_write(path, write, mode="w")


__all__ = [
    "BACKEND", "FAMILIES", "PROBE_FAMILIES", "DecisionTree", "Forest", "ForestConfig", "ProbeReport",
    "RidgeModel", "backend", "balanced_weights", "extract_rf_features", "family_importance", "fit_forest",
    "fit_ridge", "forest_bytes", "forest_from_bytes", "load_forest", "predict_forest", "predict_proba",
    "probe_target_families", "r_squared", "ridge_probe", "rf_column_families", "save_forest", "write_probe_csv",
]
