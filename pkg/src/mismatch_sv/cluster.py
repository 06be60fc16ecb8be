"""k-means, cosine average-linkage AHC, cosine gender classification and
two-step gender/language clustering (GCLC)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import EmbeddingSet, FormatError, Gender, NumericalError
from .preprocess import SubspaceModel


@dataclass(frozen=True)
class ClusteringResult:
    labels: dict[str, int]
    centroids: np.ndarray
    inertia: float
    history: tuple[float, ...] = field(default=(), compare=False)

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    def label_array(self, ids) -> np.ndarray:
        return np.array([self.labels[i] for i in ids], dtype=int)

    def members(self) -> list[list[str]]:
        out: list[list[str]] = [[] for _ in range(self.K)]
        for ident, c in self.labels.items():
            out[c].append(ident)
        return out


@dataclass(frozen=True)
class GenderModel:
    male_mean: np.ndarray
    female_mean: np.ndarray

    def __post_init__(self):
        for name in ("male_mean", "female_mean"):
            if not np.any(getattr(self, name)):
                raise FormatError(f"{name} is the zero vector")


# ----------------------------------------------------------------------- k-means

def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [int(rng.integers(n))]
    closest = _sq_dists(X, X[centers]).min(axis=1)
    for _ in range(1, K):
        total = closest.sum()
        if total <= 0.0:
            # all remaining points coincide with a centre: pick lowest unused index
            unused = np.setdiff1d(np.arange(n), centers)
            nxt = int(unused[0])
        else:
            nxt = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        centers.append(nxt)
        closest = np.minimum(closest, _sq_dists(X, X[nxt:nxt + 1])[:, 0])
    return X[centers].copy()


def lloyd(X: np.ndarray, centroids: np.ndarray, max_iter: int = 100,
          tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    """Plain Lloyd iterations from explicit centroids.

    Returns (labels, centroids, inertia, inertia_history) where the history
    holds the objective after each assignment step.
    """
    C = np.array(centroids, dtype=np.float64)
    K = C.shape[0]
    history = []
    for _ in range(max_iter):
        D = _sq_dists(X, C)
        labels = D.argmin(axis=1)
        history.append(float(D[np.arange(len(X)), labels].sum()))
        new = C.copy()
        counts = np.bincount(labels, minlength=K)
        for c in range(K):
            if counts[c]:
                new[c] = X[labels == c].mean(axis=0)
        for c in np.flatnonzero(counts == 0):
            # re-seed at the point farthest from its own centre (argmax -> lowest index on ties)
            own = _sq_dists(X, new)[np.arange(len(X)), labels]
            far = int(np.argmax(own))
            new[c] = X[far]
            labels[far] = c
        shift = float(np.sqrt(((new - C) ** 2).sum(axis=1)).max())
        C = new
        if shift < tol:
            break
    D = _sq_dists(X, C)
    labels = D.argmin(axis=1)
    inertia = float(D[np.arange(len(X)), labels].sum())
    return labels, C, inertia, history


def _result(ids, labels, centroids, inertia, history=()) -> ClusteringResult:
    return ClusteringResult(dict(zip(ids, (int(l) for l in labels))), centroids,
                            inertia, tuple(history))


def _kmeans_array(X, K, init=None, seed=None, max_iter=100, tol=1e-8):
    n = X.shape[0]
    if K <= 0:
        raise FormatError("K must be positive")
    if K > n:
        raise FormatError(f"K={K} exceeds the number of points {n}")
    if init is None:
        if seed is None:
            raise ValueError("kmeans needs either explicit initial centroids or a seed")
        init = _kmeanspp(X, K, np.random.default_rng(seed))
    init = np.asarray(init, dtype=np.float64)
    if init.shape != (K, X.shape[1]):
        raise FormatError(f"initial centroids have shape {init.shape}, expected {(K, X.shape[1])}")
    return lloyd(X, init, max_iter, tol)


def kmeans(data: EmbeddingSet, K: int, init: np.ndarray | None = None, seed: int | None = None,
           max_iter: int = 100, tol: float = 1e-8) -> ClusteringResult:
    """Euclidean k-means from explicit centroids or seeded k-means++ initialisation."""
    labels, C, inertia, history = _kmeans_array(data.vectors, K, init, seed, max_iter, tol)
    return _result(data.ids, labels, C, inertia, history)


# --------------------------------------------------------------------------- AHC

def cosine_distance_matrix(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise NumericalError("cosine distance undefined for zero vectors")
    U = X / norms[:, None]
    D = 1.0 - np.clip(U @ U.T, -1.0, 1.0)
    np.fill_diagonal(D, 0.0)
    return D


def ahc_labels(X: np.ndarray, K: int) -> np.ndarray:
    """Average-linkage agglomeration under cosine distance down to K clusters.

    Among equal distances the pair with the lexicographically smallest
    (i, j) cluster index merges first; a cluster is indexed by its smallest
    member.  Labels are numbered in order of each cluster's first member.
    """
    n = X.shape[0]
    if K <= 0 or K > n:
        raise FormatError(f"K={K} must be in [1, {n}]")
    D = cosine_distance_matrix(X)
    np.fill_diagonal(D, np.inf)
    size = np.ones(n)
    owner = np.arange(n)  # representative cluster for each point
    active = np.ones(n, dtype=bool)
    row_arg = D.argmin(axis=1)
    row_min = D[np.arange(n), row_arg]
    for _ in range(n - K):
        i = int(np.argmin(row_min))  # first row holding the global minimum
        j = int(row_arg[i])
        if j < i:  # cannot happen given the row-minimum argument, kept as a guard
            i, j = j, i
        ni, nj = size[i], size[j]
        merged = (ni * D[i] + nj * D[j]) / (ni + nj)
        merged[i] = np.inf
        merged[~active] = np.inf
        merged[j] = np.inf
        D[i] = merged
        D[:, i] = merged
        D[j] = np.inf
        D[:, j] = np.inf
        active[j] = False
        size[i] = ni + nj
        owner[owner == j] = i
        row_min[j] = np.inf
        row_arg[i] = int(np.argmin(D[i]))
        row_min[i] = D[i, row_arg[i]]
        # rows whose nearest neighbour was i or j must be rescanned
        stale = np.flatnonzero(active & ((row_arg == i) | (row_arg == j)))
        stale = stale[stale != i]
        for r in stale:
            row_arg[r] = int(np.argmin(D[r]))
            row_min[r] = D[r, row_arg[r]]
        # other rows may now have a closer (or equally close, lower-index) neighbour at i
        col = D[:, i]
        better = active & ((col < row_min) | ((col == row_min) & (i < row_arg)))
        better[i] = False
        row_arg[better] = i
        row_min[better] = col[better]
    _, labels = np.unique(owner, return_inverse=True)
    return labels


def _cluster_means(X: np.ndarray, labels: np.ndarray, K: int) -> np.ndarray:
    C = np.zeros((K, X.shape[1]))
    np.add.at(C, labels, X)
    return C / np.bincount(labels, minlength=K)[:, None]


def _inertia(X, labels, C) -> float:
    return float(((X - C[labels]) ** 2).sum())


def ahc(data: EmbeddingSet, K: int) -> ClusteringResult:
    X = data.vectors
    labels = ahc_labels(X, K)
    C = _cluster_means(X, labels, K)
    return _result(data.ids, labels, C, _inertia(X, labels, C))


# ------------------------------------------------------------------------ gender

def fit_gender_model(data: EmbeddingSet) -> GenderModel:
    genders = np.array([g.value for g in data.genders])
    means = {}
    for g in (Gender.MALE, Gender.FEMALE):
        mask = genders == g.value
        if not mask.any():
            raise FormatError(f"no {g.name.lower()} records to build a gender model")
        means[g] = data.vectors[mask].mean(axis=0)
    return GenderModel(means[Gender.MALE], means[Gender.FEMALE])


def classify_gender(data: EmbeddingSet, model: GenderModel) -> dict[str, Gender]:
    if data.dim != model.male_mean.shape[0]:
        raise FormatError(f"dimension mismatch: data d={data.dim}, model d={model.male_mean.shape[0]}")
    X = data.vectors
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise NumericalError(f"zero-norm vector {data.ids[int(np.argmin(norms))]!r}")
    cm = X @ model.male_mean / (norms * np.linalg.norm(model.male_mean))
    cf = X @ model.female_mean / (norms * np.linalg.norm(model.female_mean))
    out = {}
    for ident, a, b in zip(data.ids, cm, cf):
        out[ident] = Gender.MALE if a > b else Gender.FEMALE if b > a else Gender.UNKNOWN
    return out


# -------------------------------------------------------------------------- GCLC

def gclc_two_step(data: EmbeddingSet, K: int, init_mode: str = "ahc",
                  subspace: SubspaceModel | None = None, n_dims: int | None = None,
                  seed: int = 0, max_iter: int = 100, tol: float = 1e-8) -> ClusteringResult:
    """Two-step clustering: a coarse partition seeds full-space k-means.

    Step 1 is either k-means on subspace coordinates ``V^T w`` (``init_mode
    "subspace"``) or AHC (``"ahc"``).  Step-1 clusters become full-space
    centroids (means of the original vectors) that initialise step 2.
    The returned ``history`` starts with the step-1-derived inertia.
    """
    X = data.vectors
    if K <= 0 or K > len(data):
        raise FormatError(f"K={K} must be in [1, {len(data)}]")
    if init_mode == "subspace":
        if subspace is None or subspace.k < 1:
            raise FormatError("subspace initialisation needs a SubspaceModel with k >= 1")
        Z = subspace.coordinates(data, n_dims)
        step1, _, _, _ = _kmeans_array(Z, K, seed=seed, max_iter=max_iter, tol=tol)
    elif init_mode == "ahc":
        step1 = ahc_labels(X, K)
    else:
        raise ValueError(f"unknown init mode {init_mode!r}")
    # K-means++ in a low-dimensional space can leave a cluster empty only if
    # points coincide; guard anyway so every step-2 centroid is defined.
    counts = np.bincount(step1, minlength=K)
    if np.any(counts == 0):
        raise NumericalError("step-1 clustering produced an empty cluster")
    init = _cluster_means(X, step1, K)
    start = _inertia(X, step1, init)
    labels, C, inertia, history = lloyd(X, init, max_iter, tol)
    return _result(data.ids, labels, C, inertia, [start] + history)


# ----------------------------------------------------------------------- helpers

def clustering_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    """Accuracy under the best one-to-one cluster-to-class assignment."""
    from scipy.optimize import linear_sum_assignment

    pred = np.asarray(pred)
    _, t = np.unique(np.asarray(truth), return_inverse=True)
    _, p = np.unique(pred, return_inverse=True)
    table = np.zeros((p.max() + 1, t.max() + 1))
    np.add.at(table, (p, t), 1)
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum() / len(pred))


def same_partition(a: Mapping[str, int], b: Mapping[str, int]) -> bool:
    """True when two labelings induce identical partitions (up to renaming)."""
    if a.keys() != b.keys():
        return False
    fwd, back = {}, {}
    for ident in a:
        x, y = a[ident], b[ident]
        if fwd.setdefault(x, y) != y or back.setdefault(y, x) != x:
            return False
    return True
