"""Histogram gradient boosting with leaf-wise trees and a softmax objective.

Features are discretized once into quantile bins.  Each boosting round fits
one regression tree per class to the softmax log-loss gradients, with Newton
leaf values ``-G / (H + lambda_l2)``.  A tree grows by repeatedly splitting
the leaf whose best split has the largest gain.
"""
from __future__ import annotations

import csv
import heapq
import itertools
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields

import numba
import numpy as np

from .errors import ConfigError, DataError, NotFittedError

log = logging.getLogger(__name__)

FORMAT = "ascfusion-gbm"
VERSION = 1
# gains within this relative distance of the best count as ties and go to
# the lowest (feature, bin)
TIE_RTOL = 1e-12
MIN_SUM_HESSIAN = 1e-3
# a split must gain more than this fraction of (sum |g|)^2 / (H + lambda),
# an upper bound on every term of the gain; below it the "gain" of a node
# whose samples all carry the same gradient is round-off, not signal
GAIN_RTOL = 1e-10

# hyperparameter values searched per dimension
DEFAULT_GRID = {
    "learning_rate": [0.05, 0.1, 0.2],
    "max_bins": [128, 256, 512],
    "num_leaves": [32, 64, 128],
    "min_data_in_leaf": [500, 1000, 2000],
}
DEFAULT_LDA_DIMS = [64, 128, 256, 512]


@dataclass
class GbmConfig:
    learning_rate: float = 0.05
    max_bins: int = 128
    num_leaves: int = 128
    min_data_in_leaf: int = 500
    num_rounds: int = 100
    lambda_l2: float = 0.0
    min_sum_hessian_in_leaf: float = MIN_SUM_HESSIAN
    early_stopping_rounds: int = 0  # 0 disables; needs a validation set

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"gbm.learning_rate must be positive, got {self.learning_rate}")
        if self.max_bins < 2:
            raise ConfigError(f"gbm.max_bins must be >= 2, got {self.max_bins}")
        if self.num_leaves < 1 or self.min_data_in_leaf < 1 or self.num_rounds < 0:
            raise ConfigError("gbm.num_leaves and gbm.min_data_in_leaf must be >= 1, gbm.num_rounds >= 0")
        if self.lambda_l2 < 0 or self.min_sum_hessian_in_leaf < 0 or self.early_stopping_rounds < 0:
            raise ConfigError("gbm.lambda_l2, min_sum_hessian_in_leaf, early_stopping_rounds must be >= 0")
        return self


# ---------------------------------------------------------------------------
# binning


@dataclass
class BinnedDataset:
    edges: list  # per-feature strictly increasing cut points
    bins: np.ndarray  # (n, f) bin indices
    labels: np.ndarray | None = None

    @property
    def n_bins(self) -> np.ndarray:
        return np.array([len(e) + 1 for e in self.edges])


def quantile_cuts(values: np.ndarray, max_bins: int) -> np.ndarray:
    """Equal-frequency cut points; each one separates at least one sample on each side."""
    qs = np.arange(1, max_bins) / max_bins
    cuts = np.unique(np.quantile(values, qs))
    lo, hi = values.min(), values.max()
    return cuts[(cuts >= lo) & (cuts < hi)]


def apply_bins(X, edges) -> np.ndarray:
    """Bin index = number of cut points strictly below the value (x <= cut goes left)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != len(edges):
        raise DataError(f"expected {len(edges)} features, got shape {X.shape}")
    dtype = np.uint8 if max(len(e) for e in edges) < 255 else np.uint16
    out = np.empty(X.shape, dtype=dtype)
    for j, e in enumerate(edges):
        out[:, j] = np.searchsorted(e, X[:, j], side="left")
    return out


def bin_features(X, max_bins: int, labels=None) -> BinnedDataset:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) < 1:
        raise DataError(f"need a non-empty 2-D feature matrix, got shape {X.shape}")
    if max_bins < 2:
        raise ConfigError(f"max_bins must be >= 2, got {max_bins}")
    edges = [quantile_cuts(X[:, j], max_bins) for j in range(X.shape[1])]
    return BinnedDataset(edges, apply_bins(X, edges), None if labels is None else np.asarray(labels))


# ---------------------------------------------------------------------------
# trees


@numba.njit(cache=True)
def _histogram(bins, idx, g, h, n_bins):
    """Per-feature, per-bin sums of gradient, hessian and count: (f, n_bins, 3)."""
    f = bins.shape[1]
    out = np.zeros((f, n_bins, 3))
    for i in idx:
        gi, hi = g[i], h[i]
        for j in range(f):
            cell = out[j, bins[i, j]]
            cell[0] += gi
            cell[1] += hi
            cell[2] += 1.0
    return out


@numba.njit(cache=True)
def _split_gains(hist, lambda_l2, min_data, min_hess):
    f, nb = hist.shape[0], hist.shape[1]
    gains = np.full((f, nb - 1), -np.inf)
    for j in range(f):
        GP = HP = NP = 0.0
        for b in range(nb):
            GP += hist[j, b, 0]
            HP += hist[j, b, 1]
            NP += hist[j, b, 2]
        parent = GP * GP / (HP + lambda_l2) if HP + lambda_l2 > 0 else 0.0
        GL = HL = NL = 0.0
        for b in range(nb - 1):
            GL += hist[j, b, 0]
            HL += hist[j, b, 1]
            NL += hist[j, b, 2]
            GR, HR, NR = GP - GL, HP - HL, NP - NL
            if NL < min_data or NR < min_data or HL < min_hess or HR < min_hess:
                continue
            if HL + lambda_l2 <= 0 or HR + lambda_l2 <= 0:
                continue
            gains[j, b] = GL * GL / (HL + lambda_l2) + GR * GR / (HR + lambda_l2) - parent
    return gains


def split_gains(hist, lambda_l2, min_data, min_hess):
    """Gain of every 'bin <= t goes left' split; -inf where inadmissible.

    ``hist`` is (f, n_bins, 3) of gradient, hessian and count sums.  Returns
    an (f, n_bins - 1) array of G_L^2/(H_L+l) + G_R^2/(H_R+l) - G^2/(H+l).
    """
    return _split_gains(hist, float(lambda_l2), float(min_data), float(min_hess))


def min_gain(g, h, lambda_l2):
    """Round-off floor for split gains of the samples with gradients ``g``."""
    denom = float(np.sum(h)) + lambda_l2
    return GAIN_RTOL * float(np.sum(np.abs(g))) ** 2 / denom if denom > 0 else 0.0


def choose_split(gains, floor=0.0):
    """(feature, bin, gain) of the best split with gain above ``floor`` (and 0), or None.

    Gains within ``max(TIE_RTOL * best, floor)`` of the maximum count as
    ties (a gain is a small difference of large terms, so equal splits can
    differ by round-off of the order of ``floor``) and resolve to the lowest
    feature, then the lowest bin.
    """
    if gains.size == 0:
        return None
    best = gains.max()
    if not (best > 0 and best > floor):
        return None
    f, b = np.argwhere(gains >= best - max(TIE_RTOL * abs(best), floor))[0]
    return int(f), int(b), float(gains[f, b])


@dataclass
class Tree:
    feature: np.ndarray  # -1 for leaves
    threshold_bin: np.ndarray
    threshold: np.ndarray  # raw-value cut: x <= threshold goes left
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # leaf outputs (before learning-rate scaling)
    count: np.ndarray  # training samples reaching each node

    @property
    def leaf_count(self) -> int:
        return int(np.sum(self.feature < 0))

    def _leaf_index(self, X, binned: bool):
        node = np.zeros(len(X), dtype=np.int64)
        thr = self.threshold_bin if binned else self.threshold
        active = self.feature[node] >= 0
        while np.any(active):
            rows = np.flatnonzero(active)
            nd = node[rows]
            go_left = X[rows, self.feature[nd]] <= thr[nd]
            node[rows] = np.where(go_left, self.left[nd], self.right[nd])
            active[rows] = self.feature[node[rows]] >= 0
        return node

    def predict(self, X, binned=False):
        return self.value[self._leaf_index(X, binned)]


@dataclass
class SplitRecord:
    """One split made during growth, kept for verification."""
    round: int
    klass: int
    samples: np.ndarray
    feature: int
    bin: int
    gain: float
    grad: np.ndarray  # full per-sample arrays of the tree being grown
    hess: np.ndarray


def grow_tree(binned: BinnedDataset, g, h, cfg: GbmConfig, n_bins: int, record=None, tag=(0, 0)) -> Tree:
    bins = binned.bins
    lam, min_data, min_hess = cfg.lambda_l2, cfg.min_data_in_leaf, cfg.min_sum_hessian_in_leaf
    feature, thr_bin, left, right, value, count = [], [], [], [], [], []

    def new_node(idx, hist):
        feature.append(-1)
        thr_bin.append(0)
        left.append(-1)
        right.append(-1)
        G, H = hist[0, :, 0].sum(), hist[0, :, 1].sum()
        value.append(-G / (H + lam) if H + lam > 0 else 0.0)
        count.append(len(idx))
        return len(feature) - 1

    def candidate(node, idx, hist):
        if cfg.num_leaves < 2 or len(idx) < 2 * min_data:
            return None
        best = choose_split(split_gains(hist, lam, min_data, min_hess), min_gain(g[idx], h[idx], lam))
        return None if best is None else (node, idx, best)

    root_idx = np.arange(len(g))
    root_hist = _histogram(bins, root_idx, g, h, n_bins)
    root = new_node(root_idx, root_hist)
    heap, tick = [], itertools.count()
    cand = candidate(root, root_idx, root_hist)
    if cand:
        # max-heap on gain; earlier-created leaves win exact ties
        heapq.heappush(heap, (-cand[2][2], next(tick), cand))
    leaves = 1
    while heap and leaves < cfg.num_leaves:
        _, _, (node, idx, (f, b, gain)) = heapq.heappop(heap)
        if record is not None:
            record.append(SplitRecord(tag[0], tag[1], idx, f, b, gain, g, h))
        mask = bins[idx, f] <= b
        children = []
        for sub in (idx[mask], idx[~mask]):
            hist = _histogram(bins, sub, g, h, n_bins)
            children.append((new_node(sub, hist), sub, hist))
        feature[node], thr_bin[node] = f, b
        left[node], right[node] = children[0][0], children[1][0]
        leaves += 1
        for child in children:
            cand = candidate(*child)
            if cand:
                heapq.heappush(heap, (-cand[2][2], next(tick), cand))

    feature = np.array(feature, dtype=np.int64)
    thr_bin = np.array(thr_bin, dtype=np.int64)
    threshold = np.array([binned.edges[f][t] if f >= 0 else np.nan for f, t in zip(feature, thr_bin)])
    return Tree(feature, thr_bin, threshold, np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.array(value, dtype=np.float64), np.array(count, dtype=np.int64))


# ---------------------------------------------------------------------------
# ensemble


def softmax(raw):
    z = raw - raw.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_loss(probs, y):
    return float(-np.mean(np.log(np.maximum(probs[np.arange(len(y)), y], 1e-300))))


@dataclass
class Ensemble:
    config: GbmConfig
    edges: list
    base_scores: np.ndarray
    trees: list = field(default_factory=list)  # trees[round][class]
    n_classes: int = 15
    train_loss: list = field(default_factory=list)
    split_log: list | None = None

    @property
    def n_features(self) -> int:
        return len(self.edges)

    def raw_scores(self, X, binned=False):
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DataError(f"GBM expects {self.n_features} features, got shape {X.shape}")
        raw = np.tile(self.base_scores, (len(X), 1))
        lr = self.config.learning_rate
        for round_trees in self.trees:
            for k, tree in enumerate(round_trees):
                raw[:, k] += lr * tree.predict(X, binned)
        return raw

    def predict_proba(self, X, binned=False):
        return softmax(self.raw_scores(X, binned))

    # persistence ------------------------------------------------------

    def save(self, path):
        header = {"format": FORMAT, "version": VERSION, "config": asdict(self.config),
                  "n_classes": self.n_classes, "n_rounds": len(self.trees)}
        arrays = {"base_scores": self.base_scores,
                  "edge_offsets": np.cumsum([0] + [len(e) for e in self.edges]),
                  "edges": np.concatenate(self.edges) if self.edges else np.zeros(0)}
        flat = [t for r in self.trees for t in r]
        sizes = [len(t.feature) for t in flat]
        arrays["node_offsets"] = np.cumsum([0] + sizes)
        for name in ("feature", "threshold_bin", "threshold", "left", "right", "value", "count"):
            arrays[name] = np.concatenate([getattr(t, name) for t in flat]) if flat else np.zeros(0)
        np.savez(path, header=np.array(json.dumps(header)), **arrays)

    @classmethod
    def load(cls, path) -> "Ensemble":
        with np.load(path, allow_pickle=False) as d:
            header = json.loads(str(d["header"]))
            if header.get("format") != FORMAT or header.get("version") != VERSION:
                raise DataError(f"{path}: not a version-{VERSION} GBM model")
            eo = d["edge_offsets"]
            edges = [d["edges"][eo[i]:eo[i + 1]] for i in range(len(eo) - 1)]
            no = d["node_offsets"]
            k = header["n_classes"]
            flat = []
            for i in range(len(no) - 1):
                s = slice(no[i], no[i + 1])
                flat.append(Tree(*(d[n][s] for n in ("feature", "threshold_bin", "threshold",
                                                       "left", "right", "value", "count"))))
            trees = [flat[r * k:(r + 1) * k] for r in range(header["n_rounds"])]
            return cls(GbmConfig(**header["config"]), edges, d["base_scores"], trees, k)


def fit_gbm(binned: BinnedDataset, y, config: GbmConfig = GbmConfig(), n_classes: int = 15,
            valid=None, record_splits=False) -> Ensemble:
    """Boost ``config.num_rounds`` rounds of one tree per class.

    ``valid`` is an optional ``(X_raw, y)`` pair used only when
    ``config.early_stopping_rounds`` > 0; the ensemble is then truncated at
    the round with the lowest validation log-loss.
    """
    config.validate()
    y = np.asarray(y, dtype=np.int64)
    if len(y) != binned.bins.shape[0]:
        raise DataError(f"{binned.bins.shape[0]} rows but {len(y)} labels")
    if y.min() < 0 or y.max() >= n_classes:
        raise DataError(f"labels must lie in [0, {n_classes})")
    counts = np.bincount(y, minlength=n_classes)
    if np.any(counts == 0):
        raise DataError(f"classes {np.flatnonzero(counts == 0).tolist()} have no training samples")
    n = len(y)
    n_bins = int(binned.n_bins.max())
    base = np.log(counts / n)
    ens = Ensemble(config, binned.edges, base, [], n_classes, split_log=[] if record_splits else None)
    raw = np.tile(base, (n, 1))
    onehot = np.eye(n_classes)[y]
    ens.train_loss.append(log_loss(softmax(raw), y))
    bins = np.ascontiguousarray(binned.bins)
    binned = BinnedDataset(binned.edges, bins, y)
    use_valid = config.early_stopping_rounds > 0 and valid is not None
    if use_valid:
        v_bins = apply_bins(valid[0], binned.edges)
        v_y = np.asarray(valid[1], dtype=np.int64)
        v_raw = np.tile(base, (len(v_y), 1))
        best_loss, best_round = log_loss(softmax(v_raw), v_y), 0
    for r in range(config.num_rounds):
        p = softmax(raw)
        grad = p - onehot
        hess = p * (1.0 - p)
        trees = []
        for k in range(n_classes):
            tree = grow_tree(binned, np.ascontiguousarray(grad[:, k]), np.ascontiguousarray(hess[:, k]),
                             config, n_bins, ens.split_log, (r, k))
            trees.append(tree)
        for k, tree in enumerate(trees):
            raw[:, k] += config.learning_rate * tree.predict(bins, binned=True)
        ens.trees.append(trees)
        ens.train_loss.append(log_loss(softmax(raw), y))
        if use_valid:
            for k, tree in enumerate(trees):
                v_raw[:, k] += config.learning_rate * tree.predict(v_bins, binned=True)
            loss = log_loss(softmax(v_raw), v_y)
            if loss < best_loss:
                best_loss, best_round = loss, r + 1
            elif r + 1 - best_round >= config.early_stopping_rounds:
                break
    if use_valid:
        ens.trees = ens.trees[:best_round]
        ens.train_loss = ens.train_loss[:best_round + 1]
    return ens


def predict_proba(ensemble: Ensemble, X) -> np.ndarray:
    if ensemble is None:
        raise NotFittedError("GBM not fitted")
    return ensemble.predict_proba(X)


# ---------------------------------------------------------------------------
# grid search


@dataclass
class GridResult:
    config: GbmConfig
    lda_dim: int | None
    table: list  # dicts: hyperparameters, per-fold accuracies, mean

    def write_csv(self, path):
        if not self.table:
            return
        keys = list(self.table[0])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
            w.writeheader()
            for row in self.table:
                w.writerow(row)


def grid_points(grid: dict, lda_dims=None):
    keys = ("learning_rate", "max_bins", "num_leaves", "min_data_in_leaf")
    unknown = set(grid) - set(keys) - {f.name for f in fields(GbmConfig)}
    if unknown:
        raise ConfigError(f"unknown grid keys {sorted(unknown)}")
    names = [k for k in grid]
    dims = list(lda_dims) if lda_dims else [None]
    for dim in dims:
        for combo in itertools.product(*(grid[k] for k in names)):
            yield dict(zip(names, combo)), dim


def grid_search(segment_features, labels, recording_index, folds, grid=None, use_lda=False,
                lda_dims=None, base_config: GbmConfig = GbmConfig(), n_classes=15) -> GridResult:
    """Exhaustive search over ``grid`` (and LDA dims when ``use_lda``).

    ``segment_features`` is (n_segments, p) with ``recording_index`` giving
    the recording row of each segment; ``labels`` are per recording.  ``folds``
    is a list of (train_recordings, test_recordings) index arrays.  The best
    mean recording-level fold accuracy wins; ties prefer fewer leaves, then
    fewer bins, then a lower learning rate, then grid order.
    """
    from .evaluation import segment_accuracy
    from .features import fit_feature_scaler
    from .lda import fit_lda, transform

    grid = dict(DEFAULT_GRID if grid is None else grid)
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("grid must be non-empty")
    dims = (lda_dims or DEFAULT_LDA_DIMS) if use_lda else None
    X = np.asarray(segment_features, dtype=np.float64)
    rec = np.asarray(recording_index)
    labels = np.asarray(labels)
    seg_y = labels[rec]
    prepared = {}  # (fold, dim, max_bins) -> binned train, test features

    def prepare(fi, dim, max_bins):
        key = (fi, dim, max_bins)
        if key not in prepared:
            tr, te = folds[fi]
            tr_mask, te_mask = np.isin(rec, tr), np.isin(rec, te)
            scaler = fit_feature_scaler([X[tr_mask]])
            Xtr, Xte = scaler.transform(X[tr_mask]), scaler.transform(X[te_mask])
            if dim is not None:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    lda = fit_lda(Xtr, seg_y[tr_mask], dim)
                Xtr, Xte = transform(lda, Xtr), transform(lda, Xte)
            prepared[key] = (bin_features(Xtr, max_bins), seg_y[tr_mask], Xte, rec[te_mask])
        return prepared[key]

    table = []
    for point, dim in grid_points(grid, dims):
        cfg = GbmConfig(**{**asdict(base_config), **point})
        accs = []
        for fi in range(len(folds)):
            binned, ytr, Xte, rte = prepare(fi, dim, cfg.max_bins)
            ens = fit_gbm(binned, ytr, cfg, n_classes)
            accs.append(segment_accuracy(ens.predict_proba(Xte), rte, labels))
        row = {**point, "lda_dim": dim if dim is not None else ""}
        row.update({f"fold{i + 1}": a for i, a in enumerate(accs)})
        row["mean"] = float(np.mean(accs))
        table.append(row)
        log.info("grid %s dim=%s -> %.4f", point, dim, row["mean"])

    def rank(i):
        row = table[i]
        return (-row["mean"], row.get("num_leaves", 0), row.get("max_bins", 0), row.get("learning_rate", 0), i)

    best = table[min(range(len(table)), key=rank)]
    point = {k: best[k] for k in grid}
    return GridResult(GbmConfig(**{**asdict(base_config), **point}),
                      best["lda_dim"] if best["lda_dim"] != "" else None, table)
