"""Trial scoring (PLDA and cosine backends), S-norm and gender/language
dependent S-norm (GL-norm)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from .core import EmbeddingSet, FormatError, Gender, NumericalError, ScoreSet, TrialList
from .plda import PldaModel, PldaScorer

COSINE = "cosine"
Backend = Union[PldaModel, str]

Category = tuple  # (gender value, language)


def cosine_score(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise NumericalError("cosine score of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def score_matrix(backend: Backend, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """All-pairs scores between rows of A (enrollment side) and rows of B."""
    if isinstance(backend, PldaModel):
        return PldaScorer(backend).matrix(A, B)
    if backend != COSINE:
        raise ValueError(f"unknown backend {backend!r}")
    na, nb = np.linalg.norm(A, axis=1), np.linalg.norm(B, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise NumericalError("cosine score of a zero vector")
    return np.clip((A / na[:, None]) @ (B / nb[:, None]).T, -1.0, 1.0)


def _resolve(data: EmbeddingSet, ids: Sequence[str], side: str) -> np.ndarray:
    rows = []
    for ident in ids:
        if ident not in data:
            raise FormatError(f"unresolved {side} id {ident!r}")
        rows.append(data.index(ident))
    return np.array(rows, dtype=int)


def score_trials(backend: Backend, models: EmbeddingSet, segments: EmbeddingSet,
                 trials: TrialList) -> ScoreSet:
    mrows = _resolve(models, trials.model_ids, "model")
    srows = _resolve(segments, trials.segment_ids, "segment")
    if isinstance(backend, PldaModel):
        scores = PldaScorer(backend).pairs(models.vectors[mrows], segments.vectors[srows])
    elif backend == COSINE:
        A, B = models.vectors[mrows], segments.vectors[srows]
        na, nb = np.linalg.norm(A, axis=1), np.linalg.norm(B, axis=1)
        if np.any(na == 0) or np.any(nb == 0):
            raise NumericalError("cosine score of a zero vector")
        scores = np.clip(np.sum(A * B, axis=1) / (na * nb), -1.0, 1.0)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return ScoreSet(trials, scores)


@dataclass(frozen=True)
class NormStats:
    mu: float
    sigma: float


def cohort_stats(scores: np.ndarray, top_n: int | None = None) -> NormStats:
    """Mean and population std of a side's cohort scores (optionally top-N only)."""
    s = np.asarray(scores, float)
    if top_n is not None and top_n < s.size:
        s = np.sort(s)[::-1][:top_n]
    if s.size == 0:
        raise FormatError("empty cohort score list")
    return NormStats(float(s.mean()), float(s.std()))


def snorm(raw: ScoreSet, enroll_cohort_scores: Mapping[str, Sequence[float]],
          test_cohort_scores: Mapping[str, Sequence[float]], fallback: bool = False,
          top_n: int | None = None) -> ScoreSet:
    """Symmetric normalisation ``((s-mu_e)/sigma_e + (s-mu_t)/sigma_t) / 2``.

    With ``fallback`` a trial whose cohort std is zero keeps its raw score
    instead of raising.
    """
    stats_e: dict[str, NormStats] = {}
    stats_t: dict[str, NormStats] = {}
    out = np.empty(len(raw))
    for k, ((m, s), score) in enumerate(zip(raw.trials.trials, raw.scores)):
        try:
            if m not in stats_e:
                stats_e[m] = cohort_stats(enroll_cohort_scores[m], top_n)
            if s not in stats_t:
                stats_t[s] = cohort_stats(test_cohort_scores[s], top_n)
        except KeyError as exc:
            raise FormatError(f"no cohort scores for {exc.args[0]!r}") from None
        e, t = stats_e[m], stats_t[s]
        if e.sigma == 0.0 or t.sigma == 0.0:
            if fallback:
                out[k] = score
                continue
            raise NumericalError(f"zero cohort std for trial ({m}, {s})")
        out[k] = 0.5 * ((score - e.mu) / e.sigma + (score - t.mu) / t.sigma)
    return raw.with_scores(out)


def cohort_scores(backend: Backend, side: EmbeddingSet, cohort: EmbeddingSet,
                  side_is_enroll: bool = True) -> dict[str, np.ndarray]:
    """Scores of every vector in ``side`` against every cohort vector."""
    if side_is_enroll:
        M = score_matrix(backend, side.vectors, cohort.vectors)
    else:
        M = score_matrix(backend, cohort.vectors, side.vectors).T
    return {ident: M[i] for i, ident in enumerate(side.ids)}


def snorm_with_cohort(raw: ScoreSet, backend: Backend, models: EmbeddingSet,
                      segments: EmbeddingSet, cohort: EmbeddingSet, **kwargs) -> ScoreSet:
    used_m = models.subset(sorted(set(raw.trials.model_ids)))
    used_s = segments.subset(sorted(set(raw.trials.segment_ids)))
    return snorm(raw, cohort_scores(backend, used_m, cohort, True),
                 cohort_scores(backend, used_s, cohort, False), **kwargs)


@dataclass(frozen=True)
class Cohort:
    vectors: EmbeddingSet
    category: Mapping[str, Category]

    def __post_init__(self):
        if len(self.vectors) == 0:
            raise FormatError("empty cohort")
        missing = [i for i in self.vectors.ids if i not in self.category]
        if missing:
            raise FormatError(f"cohort member {missing[0]!r} has no category")

    def partitions(self) -> dict[Category, np.ndarray]:
        parts: dict[Category, list[int]] = {}
        for i, ident in enumerate(self.vectors.ids):
            parts.setdefault(tuple(self.category[ident]), []).append(i)
        return {c: np.array(r) for c, r in sorted(parts.items())}


def _category_stats(backend, side: EmbeddingSet, cohort: Cohort, side_categories, enroll: bool):
    parts = cohort.partitions()
    full = cohort_scores(backend, side, cohort.vectors, enroll)
    out = {}
    for ident in side.ids:
        try:
            cat = tuple(side_categories[ident])
        except KeyError:
            raise FormatError(f"no category for trial side {ident!r}") from None
        rows = parts.get(cat)
        if rows is None or rows.size < 2:
            have = 0 if rows is None else rows.size
            raise FormatError(f"cohort category {cat} has {have} members, need at least 2")
        out[ident] = full[ident][rows]
    return out


def glnorm(raw: ScoreSet, cohort: Cohort, backend: Backend, models: EmbeddingSet,
           segments: EmbeddingSet, side_categories: Mapping[str, Category], **kwargs) -> ScoreSet:
    """S-norm whose cohort for each trial side is restricted to that side's category."""
    used_m = models.subset(sorted(set(raw.trials.model_ids)))
    used_s = segments.subset(sorted(set(raw.trials.segment_ids)))
    e = _category_stats(backend, used_m, cohort, side_categories, True)
    t = _category_stats(backend, used_s, cohort, side_categories, False)
    return snorm(raw, e, t, **kwargs)


def predict_categories(data: EmbeddingSet, genders: Mapping[str, Gender],
                       languages: Mapping[str, int]) -> dict[str, Category]:
    """Combine per-id gender predictions and language cluster ids into categories."""
    out = {}
    for ident in data.ids:
        g = genders[ident]
        out[ident] = (g.value if isinstance(g, Gender) else str(g), f"L{languages[ident]}")
    return out
