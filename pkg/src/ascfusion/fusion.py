"""Late fusion of per-recording class probabilities from two models.

Non-learned rules (arithmetic / geometric mean, rank averaging) and stacking
with a meta-classifier trained on out-of-fold development probabilities.
Also owns the probability interchange CSV used between pipeline stages.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.stats import rankdata

from . import N_CLASSES
from .errors import ConfigError, DataError, NotFittedError

GEO_FLOOR = 1e-12
SIMPLE_METHODS = ("arithmetic", "geometric", "rank")
META_KINDS = ("logreg", "svm")
DEFAULT_C_GRID = (1e-3, 1e-2, 0.1, 1.0)
SVM_KERNELS = ("linear", "rbf")
META_FORMAT = "ascfusion-meta"
META_VERSION = 1


# ---------------------------------------------------------------------------
# probability interchange


@dataclass
class ProbabilityTable:
    """Class probabilities per recording, as exchanged between stages."""
    ids: list
    probs: np.ndarray  # (n, n_classes)
    labels: np.ndarray | None = None  # -1 where unknown
    model_tag: str = ""

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.probs.shape[0] != len(self.ids):
            raise DataError(f"{len(self.ids)} ids but probability array of shape {self.probs.shape}")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("duplicate recording ids in probability table")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return len(self.ids)

    def align(self, ids) -> "ProbabilityTable":
        """Rows reordered to ``ids``; every id must be present."""
        pos = {r: i for i, r in enumerate(self.ids)}
        missing = [r for r in ids if r not in pos]
        if missing:
            raise DataError(f"{self.model_tag or 'table'}: missing recordings {missing[:5]}"
                            f"{'...' if len(missing) > 5 else ''}")
        idx = np.array([pos[r] for r in ids], dtype=np.int64)
        return ProbabilityTable(list(ids), self.probs[idx],
                                None if self.labels is None else self.labels[idx], self.model_tag)

    def write_csv(self, path):
        k = self.probs.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["recording_id", "label"] + [f"p{i}" for i in range(k)] + ["model_tag"])
            for i, rid in enumerate(self.ids):
                label = "" if self.labels is None or self.labels[i] < 0 else int(self.labels[i])
                w.writerow([rid, label] + [repr(float(v)) for v in self.probs[i]] + [self.model_tag])

    @classmethod
    def read_csv(cls, path) -> "ProbabilityTable":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:2] != ["recording_id", "label"] or rows[0][-1] != "model_tag":
            raise DataError(f"{path}: not a probability table (bad header)")
        k = len(rows[0]) - 3
        ids, probs, labels, tags = [], [], [], set()
        for ln, row in enumerate(rows[1:], start=2):
            if len(row) != k + 3:
                raise DataError(f"{path}:{ln}: expected {k + 3} fields, got {len(row)}")
            ids.append(row[0])
            labels.append(int(row[1]) if row[1] != "" else -1)
            probs.append([float(v) for v in row[2:2 + k]])
            tags.add(row[-1])
        labels = np.array(labels)
        return cls(ids, np.array(probs).reshape(-1, k), None if np.all(labels < 0) else labels,
                   tags.pop() if len(tags) == 1 else "")


def check_distributions(p, tol=1e-6, what="probabilities"):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(~np.isfinite(p)):
        raise DataError(f"{what}: negative or non-finite values")
    if np.any(np.abs(p.sum(axis=-1) - 1) > tol):
        raise DataError(f"{what}: rows do not sum to 1")
    return p


# ---------------------------------------------------------------------------
# simple rules


def ranks(p):
    """Per-row ranks 1..K, highest probability -> K; tied values share their average rank."""
    return rankdata(np.asarray(p, dtype=np.float64), method="average", axis=-1)


def fuse_simple(method: str, p_cnn, p_gbm):
    """Fuse two (n, K) or (K,) probability arrays.  Returns (fused, labels).

    Tables may be passed instead of arrays; their recording ids must match.
    """
    if isinstance(p_cnn, ProbabilityTable) or isinstance(p_gbm, ProbabilityTable):
        if not (isinstance(p_cnn, ProbabilityTable) and isinstance(p_gbm, ProbabilityTable)):
            raise DataError("fuse two probability tables or two arrays, not a mix")
        if list(p_cnn.ids) != list(p_gbm.ids):
            if set(p_cnn.ids) != set(p_gbm.ids):
                raise DataError("recording ids of the two models differ")
            p_gbm = p_gbm.align(p_cnn.ids)
        p_cnn, p_gbm = p_cnn.probs, p_gbm.probs
    p = check_distributions(p_cnn, what="first model")
    q = check_distributions(p_gbm, what="second model")
    if p.shape != q.shape:
        raise DataError(f"shape mismatch {p.shape} vs {q.shape}")
    if method == "arithmetic":
        fused = (p + q) / 2
    elif method == "geometric":
        fused = np.sqrt(np.maximum(p, GEO_FLOOR) * np.maximum(q, GEO_FLOOR))
        fused /= fused.sum(axis=-1, keepdims=True)
    elif method == "rank":
        fused = (ranks(p) + ranks(q)) / 2
        fused /= fused.sum(axis=-1, keepdims=True)
    else:
        raise ConfigError(f"unknown fusion method {method!r}; choose from {SIMPLE_METHODS + ('stacking',)}")
    return fused, np.argmax(fused, axis=-1)


# ---------------------------------------------------------------------------
# multinomial logistic regression


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class LogisticRegression:
    """Multinomial logistic regression minimizing C * sum(CE) + ||W||^2 / 2.

    The intercept is not penalized.  Fitted by damped Newton iterations with
    backtracking, so the objective never increases between iterations.
    """
    C: float = 1.0
    tol: float = 1e-8
    max_iter: int = 100
    coef: np.ndarray | None = None  # (K, p)
    intercept: np.ndarray | None = None  # (K,)
    loss_history: list = field(default_factory=list)

    def _objective(self, theta, X1, Y):
        K = Y.shape[1]
        W = theta.reshape(K, -1)
        P = _softmax(X1 @ W.T)
        ce = -np.sum(Y * np.log(np.maximum(P, 1e-300)))
        return self.C * ce + 0.5 * np.sum(W[:, :-1] ** 2), P

    def fit(self, X, y, n_classes=N_CLASSES):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        n, p = X.shape
        K = n_classes
        X1 = np.hstack([X, np.ones((n, 1))])
        Y = np.eye(K)[y]
        d = p + 1
        theta = np.zeros(K * d)
        reg = np.ones(d)
        reg[-1] = 0.0
        reg = np.tile(reg, K)
        f, P = self._objective(theta, X1, Y)
        self.loss_history = [f]
        for _ in range(self.max_iter):
            grad = (self.C * (P - Y).T @ X1).ravel() + reg * theta
            if np.max(np.abs(grad)) < self.tol:
                break
            # Hessian blocks: C * sum_i (diag(P_i) - P_i P_i^T)_{kl} x_i x_i^T
            H = np.empty((K * d, K * d))
            for k in range(K):
                for l in range(k, K):
                    w = P[:, k] * ((k == l) - P[:, l])
                    block = self.C * (X1.T * w) @ X1
                    H[k * d:(k + 1) * d, l * d:(l + 1) * d] = block
                    H[l * d:(l + 1) * d, k * d:(k + 1) * d] = block.T
            H[np.diag_indices_from(H)] += reg + 1e-10  # softmax shift invariance leaves H singular
            step = linalg.solve(H, grad, assume_a="sym")
            t = 1.0
            while True:
                cand = theta - t * step
                f_new, P_new = self._objective(cand, X1, Y)
                if f_new <= f - 1e-4 * t * (grad @ step) or t < 1e-10:
                    break
                t *= 0.5
            if f_new > f:  # no descent possible at machine precision
                break
            converged = f - f_new <= self.tol * max(1.0, abs(f))
            theta, f, P = cand, f_new, P_new
            self.loss_history.append(f)
            if converged:
                break
        W = theta.reshape(K, d)
        self.coef, self.intercept = W[:, :-1].copy(), W[:, -1].copy()
        return self

    def decision_function(self, X):
        if self.coef is None:
            raise NotFittedError("logistic regression used before fit")
        return np.asarray(X, dtype=np.float64) @ self.coef.T + self.intercept

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))


# ---------------------------------------------------------------------------
# meta learner


def stack_features(p_cnn, p_gbm, log_inputs=False):
    X = np.hstack([np.asarray(p_cnn, dtype=np.float64), np.asarray(p_gbm, dtype=np.float64)])
    return np.log(np.maximum(X, GEO_FLOOR)) if log_inputs else X


def cv_folds(y, k, seed):
    """Seeded stratified k-fold indices: list of (train, test)."""
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(y), dtype=np.int64)
    offset = 0
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        members = members[rng.permutation(len(members))]
        fold_of[members] = (np.arange(len(members)) + offset) % k
        offset += len(members)
    return [(np.flatnonzero(fold_of != f), np.flatnonzero(fold_of == f)) for f in range(k)]


@dataclass
class MetaLearner:
    kind: str = "logreg"
    C: float = 1.0
    kernel: str = "linear"
    log_inputs: bool = False
    n_classes: int = N_CLASSES
    cv_table: list = field(default_factory=list)  # (C, kernel, accuracy)
    model: object = None
    # SVMs are rebuilt from their training data on load
    train_X: np.ndarray | None = None
    train_y: np.ndarray | None = None

    @property
    def fitted(self):
        return self.model is not None

    def _make(self, C, kernel):
        if self.kind == "logreg":
            return LogisticRegression(C=C)
        from sklearn.svm import SVC
        return SVC(C=C, kernel=kernel, decision_function_shape="ovr")

    def _fit_model(self, X, y, C, kernel):
        m = self._make(C, kernel)
        if self.kind == "logreg":
            return m.fit(X, y, self.n_classes)
        return m.fit(X, y)

    def scores(self, p_cnn, p_gbm):
        if not self.fitted:
            raise NotFittedError("meta learner used before fit")
        X = stack_features(p_cnn, p_gbm, self.log_inputs)
        s = self.model.decision_function(X)
        if self.kind == "svm":
            # map columns of the classes seen in training onto all classes
            full = np.full((len(X), self.n_classes), -np.inf)
            classes = self.model.classes_
            full[:, classes] = s if s.ndim == 2 else np.stack([-s, s], axis=1)
            return full
        return s

    def predict(self, p_cnn, p_gbm):
        return np.argmax(self.scores(p_cnn, p_gbm), axis=1)

    def predict_proba(self, p_cnn, p_gbm):
        """Class probabilities: softmax of the logistic scores; SVMs give one-hot rows."""
        s = self.scores(p_cnn, p_gbm)
        if self.kind == "logreg":
            return _softmax(s)
        return np.eye(self.n_classes)[np.argmax(s, axis=1)]

    def save(self, path):
        header = {"format": META_FORMAT, "version": META_VERSION, "kind": self.kind, "C": self.C,
                  "kernel": self.kernel, "log_inputs": self.log_inputs, "n_classes": self.n_classes,
                  "cv_table": self.cv_table}
        arrays = {}
        if self.kind == "logreg":
            arrays = {"coef": self.model.coef, "intercept": self.model.intercept}
        else:
            arrays = {"train_X": self.train_X, "train_y": self.train_y}
        np.savez(path, header=np.array(json.dumps(header)), **arrays)

    @classmethod
    def load(cls, path) -> "MetaLearner":
        with np.load(path, allow_pickle=False) as d:
            h = json.loads(str(d["header"]))
            if h.get("format") != META_FORMAT or h.get("version") != META_VERSION:
                raise DataError(f"{path}: not a version-{META_VERSION} meta-learner file")
            meta = cls(h["kind"], h["C"], h["kernel"], h["log_inputs"], h["n_classes"],
                       [tuple(r) for r in h["cv_table"]])
            if meta.kind == "logreg":
                meta.model = LogisticRegression(C=meta.C, coef=d["coef"], intercept=d["intercept"])
            else:
                meta.train_X, meta.train_y = d["train_X"], d["train_y"]
                meta.model = meta._fit_model(meta.train_X, meta.train_y, meta.C, meta.kernel)
        return meta


def fit_meta_learner(kind, p_cnn, p_gbm, labels=None, seed=0, c_grid=DEFAULT_C_GRID,
                     kernels=SVM_KERNELS, log_inputs=False, n_folds=4, n_classes=N_CLASSES) -> MetaLearner:
    """Choose the regularization (and kernel) by stratified k-fold CV accuracy,
    then refit on all rows.  Ties prefer stronger regularization (smaller C),
    then the earlier kernel.

    ``p_cnn``/``p_gbm`` are aligned (n, K) arrays or ProbabilityTables; with
    tables, ids must match and labels are taken from the tables when
    ``labels`` is None.
    """
    if kind not in META_KINDS:
        raise ConfigError(f"unknown meta learner {kind!r}; choose from {META_KINDS}")
    if isinstance(p_cnn, ProbabilityTable):
        if set(p_cnn.ids) != set(p_gbm.ids):
            missing = sorted(set(p_cnn.ids) ^ set(p_gbm.ids))
            raise DataError(f"recordings missing from one model's probabilities: {missing[:5]}")
        p_gbm = p_gbm.align(p_cnn.ids)
        if labels is None:
            labels = p_cnn.labels
        p_cnn, p_gbm = p_cnn.probs, p_gbm.probs
    if labels is None or np.any(np.asarray(labels) < 0):
        raise DataError("meta learner needs labels for every recording")
    p_cnn, p_gbm = np.asarray(p_cnn), np.asarray(p_gbm)
    if p_cnn.shape != p_gbm.shape or len(p_cnn) != len(labels):
        raise DataError(f"misaligned inputs {p_cnn.shape}, {p_gbm.shape}, {len(labels)} labels")
    y = np.asarray(labels, dtype=np.int64)
    X = stack_features(p_cnn, p_gbm, log_inputs)
    meta = MetaLearner(kind, log_inputs=log_inputs, n_classes=n_classes)
    folds = cv_folds(y, n_folds, seed)
    candidates = [(C, k) for k in (kernels if kind == "svm" else ("linear",)) for C in sorted(c_grid)]
    best = None
    for C, kernel in candidates:
        correct = 0
        for tr, te in folds:
            if len(np.unique(y[tr])) == 1:
                pred = np.full(len(te), y[tr][0])
            else:
                m = meta._fit_model(X[tr], y[tr], C, kernel)
                tmp = MetaLearner(kind, C, kernel, log_inputs, n_classes, model=m)
                pred = np.argmax(tmp.scores(p_cnn[te], p_gbm[te]), axis=1)
            correct += int(np.sum(pred == y[te]))
        acc = correct / len(y)
        meta.cv_table.append((C, kernel, acc))
        if best is None or acc > best[2]:
            best = (C, kernel, acc)
    meta.C, meta.kernel = best[0], best[1]
    meta.model = meta._fit_model(X, y, meta.C, meta.kernel)
    if kind == "svm":
        meta.train_X, meta.train_y = X, y
    return meta


def predict_stacked(meta: MetaLearner, p_cnn, p_gbm):
    if meta is None or not meta.fitted:
        raise NotFittedError("meta learner used before fit")
    if isinstance(p_cnn, ProbabilityTable):
        p_gbm = p_gbm.align(p_cnn.ids)
        p_cnn, p_gbm = p_cnn.probs, p_gbm.probs
    return meta.predict(p_cnn, p_gbm)
