"""Fisher linear discriminant analysis for reducing segment features.

Scatter matrices are population-normalized (divided by n).  The within-class
scatter is shrunk towards a scaled identity and the generalized problem
``Sb v = lam (Sw + g I) v`` is solved in whitened coordinates, which keeps the
eigenvalues real and the computation symmetric.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import ConfigError, DataError, NotFittedError

log = logging.getLogger(__name__)

SHRINKAGE = 1e-4
RANK_TOL = 1e-10
FORMAT = "ascfusion-lda"
VERSION = 1


@dataclass
class LdaModel:
    projection: np.ndarray  # (d, p)
    mean: np.ndarray  # (p,)
    eigenvalues: np.ndarray  # (d,), descending
    requested_dim: int
    effective_rank: int
    shrinkage: float = SHRINKAGE
    warnings: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.projection.shape[0]

    def transform(self, X) -> np.ndarray:
        return transform(self, X)

    def save(self, path):
        header = {"format": FORMAT, "version": VERSION, "requested_dim": self.requested_dim,
                  "effective_rank": self.effective_rank, "shrinkage": self.shrinkage,
                  "warnings": self.warnings}
        np.savez(path, header=np.array(json.dumps(header)), mean=self.mean,
                 eigenvalues=self.eigenvalues, projection=self.projection)

    @classmethod
    def load(cls, path) -> "LdaModel":
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            if header.get("format") != FORMAT or header.get("version") != VERSION:
                raise DataError(f"{path}: not a version-{VERSION} LDA model")
            return cls(data["projection"], data["mean"], data["eigenvalues"], header["requested_dim"],
                       header["effective_rank"], header["shrinkage"], header["warnings"])


def scatter_matrices(X, y):
    """Population-normalized within- and between-class scatter."""
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    p = X.shape[1]
    Sw = np.zeros((p, p))
    Sb = np.zeros((p, p))
    for k in np.unique(y):
        Xk = X[y == k]
        mk = Xk.mean(axis=0)
        D = Xk - mk
        Sw += D.T @ D
        dm = (mk - mean)[:, None]
        Sb += len(Xk) * (dm @ dm.T)
    return Sw / len(X), Sb / len(X), mean


def fit_lda(X, y, d: int, shrinkage: float = SHRINKAGE, strict: bool = False) -> LdaModel:
    """Fit a d-dimensional projection.

    ``strict`` caps ``d`` at the between-class rank (classes - 1).  Otherwise a
    request beyond that rank is honored with near-null directions, taken as
    the principal axes of within-class variance inside the Fisher null space,
    and a warning is recorded.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) != len(y):
        raise DataError(f"features {X.shape} do not match {len(y)} labels")
    n, p = X.shape
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise DataError("LDA needs at least two classes (between-class scatter is zero)")
    if np.any(counts < 2):
        raise DataError(f"classes {classes[counts < 2].tolist()} have fewer than two samples")
    if not 1 <= d <= p:
        raise ConfigError(f"LDA dimension {d} outside [1, {p}]")
    if n <= p:
        log.info("LDA with n=%d <= p=%d; within-class shrinkage dominates null directions", n, p)

    Sw, Sb, mean = scatter_matrices(X, y)
    gamma = shrinkage * np.trace(Sw) / p
    if gamma <= 0:
        raise DataError("within-class scatter is zero; features are constant within classes")
    L = linalg.cholesky(Sw + gamma * np.eye(p), lower=True)
    # M = L^-1 Sb L^-T, symmetric positive semi-definite
    A = linalg.solve_triangular(L, Sb, lower=True)
    M = linalg.solve_triangular(L, A.T, lower=True)
    M = 0.5 * (M + M.T)
    evals, U = linalg.eigh(M)
    evals, U = evals[::-1], U[:, ::-1]
    top = evals[0] if evals[0] > 0 else 1.0
    rank = int(min(np.sum(evals > RANK_TOL * top), len(classes) - 1))
    notes = []
    if strict and d > rank:
        notes.append(f"requested dim {d} capped at between-class rank {rank}")
        d = rank
    if d > rank:
        # the near-null eigenspace is degenerate, so eigh's basis for it is
        # arbitrary; pin it down as the principal axes of the whitened
        # within-class scatter restricted to that space, largest first
        null = U[:, rank:]
        B = linalg.solve_triangular(L, Sw, lower=True)
        W = linalg.solve_triangular(L, B.T, lower=True)
        C = null.T @ W @ null
        energy, Q = linalg.eigh(0.5 * (C + C.T))
        null = null @ Q[:, ::-1]
        U = np.concatenate([U[:, :rank], null], axis=1)
        evals = np.concatenate([evals[:rank], np.einsum("ij,ij->j", null, M @ null)])
        notes.append(f"requested dim {d} exceeds between-class rank {rank}; "
                     f"{d - rank} near-null directions included")
    for note in notes:
        warnings.warn(note, stacklevel=2)
    V = linalg.solve_triangular(L.T, U[:, :d], lower=False)  # back to feature space
    V /= np.linalg.norm(V, axis=0, keepdims=True)
    # sign convention: the largest-magnitude component of each direction is positive
    idx = np.argmax(np.abs(V), axis=0)
    V *= np.sign(V[idx, np.arange(d)])
    return LdaModel(V.T.copy(), mean, evals[:d].copy(),
                    d, rank, shrinkage, notes)


def transform(model: LdaModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if model is None or model.projection is None:
        raise NotFittedError("LDA model not fitted")
    if X.shape[-1] != model.mean.shape[0]:
        raise DataError(f"LDA expects {model.mean.shape[0]} features, got {X.shape[-1]}")
    return (X - model.mean) @ model.projection.T


def generalized_residual(model: LdaModel, X, y, shrinkage=None) -> np.ndarray:
    """‖Sb v − λ (Sw + γI) v‖ / ‖v‖ for every kept direction."""
    Sw, Sb, _ = scatter_matrices(X, y)
    p = Sw.shape[0]
    g = (model.shrinkage if shrinkage is None else shrinkage) * np.trace(Sw) / p
    Swr = Sw + g * np.eye(p)
    V = model.projection.T
    R = Sb @ V - (Swr @ V) * model.eigenvalues[None, :]
    return np.linalg.norm(R, axis=0) / np.linalg.norm(V, axis=0)
