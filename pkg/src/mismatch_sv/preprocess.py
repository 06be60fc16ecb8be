"""Centering/whitening, length normalization and nuisance-subspace removal.

IDVC and ILVC share one mechanism: estimate the span of per-group mean
vectors (groups = dataset x gender, or language x gender) and project it out.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (UNKNOWN, EmbeddingSet, FormatError, NumericalError, parse_header,
                   read_matrix_lines, write_matrix_lines)

RANK_TOL = 1e-10


@dataclass(frozen=True)
class WhitenModel:
    mean: np.ndarray
    transform: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(f"whiten d={self.dim}\n")
            write_matrix_lines(f, self.mean[None, :])
            write_matrix_lines(f, self.transform)

    @classmethod
    def load(cls, path) -> "WhitenModel":
        with open(path, encoding="utf-8") as f:
            lines = [l for l in f if l.strip()]
        if not lines:
            raise FormatError(f"{path}: empty model file")
        d = int(parse_header(lines[0], "whiten", path)["d"])
        mean = read_matrix_lines(lines[1:2], 1, d, path)[0]
        transform = read_matrix_lines(lines[2:], d, d, path)
        return cls(mean, transform)


@dataclass(frozen=True)
class SubspaceModel:
    basis: np.ndarray  # (d, k), orthonormal columns
    grouping: str

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    def coordinates(self, data: EmbeddingSet, n_dims: int | None = None) -> np.ndarray:
        """Project vectors onto the (leading ``n_dims`` of the) basis."""
        basis = self.basis if n_dims is None else self.basis[:, :n_dims]
        return data.vectors @ basis

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(f"subspace d={self.dim} k={self.k} grouping={self.grouping}\n")
            write_matrix_lines(f, self.basis.T)  # one basis vector per line

    @classmethod
    def load(cls, path) -> "SubspaceModel":
        with open(path, encoding="utf-8") as f:
            lines = [l for l in f if l.strip()]
        if not lines:
            raise FormatError(f"{path}: empty model file")
        head = parse_header(lines[0], "subspace", path)
        d, k = int(head["d"]), int(head["k"])
        rows = read_matrix_lines(lines[1:], k, d, path) if k else np.zeros((0, d))
        return cls(rows.T.copy(), head.get("grouping", ""))


def _check_dim(data: EmbeddingSet, dim: int) -> None:
    if data.dim != dim:
        raise FormatError(f"dimension mismatch: data has d={data.dim}, model has d={dim}")


def fit_whiten(data: EmbeddingSet, ridge: float | None = None) -> WhitenModel:
    """Fit a centering + whitening transform ``Lambda^-1/2 U^T`` on ``data``.

    Covariance is the maximum-likelihood (1/n) estimate.  ``ridge`` defaults to
    ``1e-6 * trace(cov) / d``; eigenvalues of ``cov + ridge*I`` are clamped
    below at ``ridge``.
    """
    n = len(data)
    if n < 2:
        raise FormatError(f"whitening needs at least 2 vectors, got {n}")
    X = data.vectors
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / n
    d = X.shape[1]
    if ridge is None:
        ridge = 1e-6 * np.trace(cov) / d
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    evals, evecs = np.linalg.eigh(cov + ridge * np.eye(d))
    floor = max(ridge, np.finfo(float).tiny)
    evals = np.maximum(evals, floor)
    transform = evecs.T / np.sqrt(evals)[:, None]
    return WhitenModel(mean, transform)


def apply_whiten(data: EmbeddingSet, model: WhitenModel) -> EmbeddingSet:
    _check_dim(data, model.dim)
    return data.with_vectors((data.vectors - model.mean) @ model.transform.T)


def length_normalize(data: EmbeddingSet) -> EmbeddingSet:
    norms = np.linalg.norm(data.vectors, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise NumericalError(f"zero-norm vector for id {data.ids[zero[0]]!r}")
    return data.with_vectors(data.vectors / norms[:, None])


def group_means(data: EmbeddingSet, grouping: Sequence[str]) -> dict[tuple[str, ...], np.ndarray]:
    """Per-group mean vectors; records with an unknown grouping label are skipped."""
    columns = [data.labels(key) for key in grouping]
    members: dict[tuple[str, ...], list[int]] = {}
    for i in range(len(data)):
        group = tuple(col[i] for col in columns)
        if UNKNOWN in group:
            continue
        members.setdefault(group, []).append(i)
    return {g: data.vectors[rows].mean(axis=0) for g, rows in sorted(members.items())}


def fit_nuisance_subspace(
    data: EmbeddingSet,
    grouping: Sequence[str],
    k: int | None = None,
    center: str = "groups",
) -> SubspaceModel:
    """Basis of the subspace spanned by centered per-group means.

    ``center="groups"`` subtracts the unweighted mean of the group means, so at
    most G-1 directions exist.  ``center="data"`` subtracts the pooled data
    mean instead, allowing up to G directions.  ``k`` defaults to the numerical
    rank of the centered group-mean matrix.
    """
    means = group_means(data, grouping)
    G = len(means)
    if G < 2:
        raise FormatError(f"need at least 2 groups over {'x'.join(grouping)}, found {G}")
    M = np.stack(list(means.values()), axis=1)  # (d, G)
    if center == "groups":
        M = M - M.mean(axis=1, keepdims=True)
        k_max = G - 1
    elif center == "data":
        labelled = np.ones(len(data), dtype=bool)
        for key in grouping:
            labelled &= np.array([v != UNKNOWN for v in data.labels(key)])
        M = M - data.vectors[labelled].mean(axis=0)[:, None]
        k_max = G
    else:
        raise ValueError(f"center must be 'groups' or 'data', got {center!r}")
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    rank = int(np.sum(s > RANK_TOL * max(s[0], 1.0))) if s.size else 0
    if k is None:
        k = rank
    if k < 0 or k > k_max:
        raise FormatError(f"k={k} out of range: at most {k_max} directions for {G} groups")
    if k > U.shape[1]:
        raise FormatError(f"k={k} exceeds the available dimension {U.shape[1]}")
    return SubspaceModel(U[:, :k].copy(), "x".join(grouping))


def remove_subspace(data: EmbeddingSet, model: SubspaceModel) -> EmbeddingSet:
    _check_dim(data, model.dim)
    V = model.basis
    X = data.vectors
    return data.with_vectors(X - (X @ V) @ V.T)


def pca_subspace(data: EmbeddingSet, k: int) -> SubspaceModel:
    """Leading principal directions of ``data``; used to seed language clustering."""
    if not 1 <= k <= min(len(data), data.dim):
        raise FormatError(f"pca k={k} out of range")
    centered = data.vectors - data.vectors.mean(axis=0)
    _, _, Vt = np.linalg.svd(centered, full_matrices=False)
    basis = Vt[:k].T.copy()
    # deterministic sign: largest-magnitude component positive
    signs = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(k)])
    return SubspaceModel(basis * signs, "pca")
