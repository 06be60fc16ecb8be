"""Two-covariance PLDA: EM training, LLR scoring, interpolation and
pseudo-speaker training from AHC clusters.

Generative model: speaker variable ``y ~ N(mu, B)``, session ``w ~ N(y, W)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .core import UNKNOWN, EmbeddingSet, FormatError, NumericalError, parse_header, \
    read_matrix_lines, write_matrix_lines

log = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class PldaModel:
    mu: np.ndarray
    B: np.ndarray  # across-speaker covariance
    W: np.ndarray  # within-speaker covariance

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(f"plda d={self.dim}\n")
            write_matrix_lines(f, self.mu[None, :])
            write_matrix_lines(f, self.B)
            write_matrix_lines(f, self.W)

    @classmethod
    def load(cls, path) -> "PldaModel":
        with open(path, encoding="utf-8") as f:
            lines = [l for l in f if l.strip()]
        if not lines:
            raise FormatError(f"{path}: empty model file")
        d = int(parse_header(lines[0], "plda", path)["d"])
        mu = read_matrix_lines(lines[1:2], 1, d, path)[0]
        B = read_matrix_lines(lines[2:2 + d], d, d, path)
        W = read_matrix_lines(lines[2 + d:2 + 2 * d], d, d, path)
        return cls(mu, B, W)


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def _group_by_speaker(data: EmbeddingSet) -> list[np.ndarray]:
    rows: dict[str, list[int]] = {}
    for i, spk in enumerate(data.speakers):
        if spk == UNKNOWN:
            raise FormatError(f"record {data.ids[i]!r} has no speaker label")
        rows.setdefault(spk, []).append(i)
    return [np.array(r) for _, r in sorted(rows.items())]


class _Stats:
    """Sufficient statistics per speaker, grouped by session count."""

    def __init__(self, X: np.ndarray, groups: list[np.ndarray], mu: np.ndarray):
        Xc = X - mu
        self.n = np.array([len(g) for g in groups])
        self.f = np.stack([Xc[g].sum(axis=0) for g in groups])  # (S, d) first-order
        self.scatter = Xc.T @ Xc
        multi = self.n > 1
        idx = np.concatenate([g for g, m in zip(groups, multi) if m]) if multi.any() else np.array([], int)
        Xm = Xc[idx]
        self.scatter_multi = Xm.T @ Xm
        self.N = int(self.n.sum())
        self.N_multi = int(self.n[multi].sum())
        self.multi = multi
        self.S = len(groups)
        self.d = X.shape[1]


def _posteriors(stats: _Stats, B: np.ndarray, W: np.ndarray):
    """Posterior covariances (per distinct n) and centered posterior means."""
    Bi = linalg.inv(B)
    Wi = linalg.inv(W)
    covs = {}
    for n in np.unique(stats.n):
        covs[int(n)] = _sym(linalg.inv(_sym(Bi + n * Wi)))
    means = np.empty_like(stats.f)
    WiF = stats.f @ Wi
    for n, C in covs.items():
        sel = stats.n == n
        means[sel] = WiF[sel] @ C
    return covs, means, Wi


def log_likelihood(model_B: np.ndarray, model_W: np.ndarray, stats: _Stats) -> float:
    """Exact marginal log-likelihood of all sessions (speakers integrated out)."""
    Wi = linalg.inv(model_W)
    Bi = linalg.inv(model_B)
    _, logdet_W = np.linalg.slogdet(model_W)
    _, logdet_B = np.linalg.slogdet(model_B)
    quad = float(np.sum(Wi * stats.scatter))  # sum_i x_i^T Wi x_i
    WiF = stats.f @ Wi
    total = -0.5 * stats.N * (stats.d * LOG2PI + logdet_W) - 0.5 * quad - 0.5 * stats.S * logdet_B
    for n in np.unique(stats.n):
        L = _sym(Bi + n * Wi)
        cho = linalg.cho_factor(L)
        sel = stats.n == n
        g = WiF[sel]
        logdet_L = 2.0 * np.sum(np.log(np.diag(cho[0])))
        total += -0.5 * sel.sum() * logdet_L + 0.5 * float(np.sum(g * linalg.cho_solve(cho, g.T).T))
    return float(total)


@dataclass
class TrainingTrace:
    log_likelihoods: list[float]


def train_plda(data: EmbeddingSet, iters: int = 10, ridge_scale: float = 1e-8,
               trace: TrainingTrace | None = None) -> PldaModel:
    """EM estimate of (B, W) for the two-covariance model, ``mu`` fixed at the data mean.

    Initialisation is ``B = W = total_cov / 2``.  Single-session speakers
    inform B but are left out of the W update.  A ridge of
    ``ridge_scale * trace(W) / d`` keeps W positive definite.

    If ``trace`` is given, the log-likelihood before the first iteration and
    after each iteration is appended to it.
    """
    groups = _group_by_speaker(data)
    if len(groups) < 2:
        raise FormatError(f"PLDA needs at least 2 speakers, got {len(groups)}")
    X = data.vectors
    d = X.shape[1]
    mu = X.mean(axis=0)
    stats = _Stats(X, groups, mu)
    if not stats.multi.any():
        raise FormatError("every speaker has a single session; within-speaker covariance is unidentifiable")
    total = stats.scatter / stats.N
    ridge0 = ridge_scale * max(np.trace(total), np.finfo(float).tiny) / d
    B = 0.5 * total + ridge0 * np.eye(d)
    W = 0.5 * total + ridge0 * np.eye(d)
    if trace is not None:
        trace.log_likelihoods.append(log_likelihood(B, W, stats))
    for it in range(iters):
        try:
            covs, means, _ = _posteriors(stats, B, W)
        except (linalg.LinAlgError, ValueError) as exc:
            raise NumericalError(f"PLDA E-step failed at iteration {it}: {exc}") from exc
        # M-step, fixed summation order
        post_cov_sum = sum(covs[int(n)] * np.sum(stats.n == n) for n in np.unique(stats.n))
        B = _sym((means.T @ means + post_cov_sum) / stats.S)
        # within: sum_i (x_i - y)(x_i - y)^T + n C over multi-session speakers
        m = stats.multi
        nm = stats.n[m]
        cross = stats.f[m].T @ means[m]
        W = (stats.scatter_multi - cross - cross.T + (means[m].T * nm) @ means[m]
             + sum(covs[int(n)] * n * np.sum(nm == n) for n in np.unique(nm)))
        W = _sym(W / stats.N_multi)
        W += ridge_scale * max(np.trace(W), np.trace(total)) / d * np.eye(d)
        if trace is not None:
            trace.log_likelihoods.append(log_likelihood(B, W, stats))
    if np.linalg.eigvalsh(W)[0] <= 0:
        raise NumericalError("within-speaker covariance is not positive definite")
    return PldaModel(mu, B, W)


class PldaScorer:
    """Precomputed closed form of the verification LLR for one model.

    ``llr(e, t) = 1/2 e'Qe + 1/2 t'Qt + e'Pt + const`` with ``e, t`` centred by ``mu``.
    """

    def __init__(self, model: PldaModel):
        d = model.dim
        B, W = model.B, model.W
        tot = _sym(B + W)
        target_cov = np.block([[tot, B], [B, tot]])
        try:
            cho_tot = linalg.cho_factor(tot)
            linalg.cholesky(target_cov)
        except linalg.LinAlgError as exc:
            raise NumericalError(f"singular PLDA covariance: {exc}") from exc
        tot_inv = linalg.cho_solve(cho_tot, np.eye(d))
        # inverse of the 2x2 block [[T, B], [B, T]] via its Schur complement
        schur = _sym(tot - B @ tot_inv @ B)
        schur_inv = _sym(linalg.inv(schur))
        self.Q = _sym(tot_inv - schur_inv)
        self.P = tot_inv @ B @ schur_inv
        _, logdet_target = np.linalg.slogdet(target_cov)
        logdet_tot = 2.0 * np.sum(np.log(np.diag(cho_tot[0])))
        self.const = -0.5 * logdet_target + logdet_tot
        self.mu = model.mu

    def matrix(self, E: np.ndarray, T: np.ndarray) -> np.ndarray:
        Ec = np.atleast_2d(E) - self.mu
        Tc = np.atleast_2d(T) - self.mu
        qe = 0.5 * np.sum((Ec @ self.Q) * Ec, axis=1)
        qt = 0.5 * np.sum((Tc @ self.Q) * Tc, axis=1)
        return qe[:, None] + qt[None, :] + Ec @ self.P @ Tc.T + self.const

    def pairs(self, E: np.ndarray, T: np.ndarray) -> np.ndarray:
        Ec = np.atleast_2d(E) - self.mu
        Tc = np.atleast_2d(T) - self.mu
        return (0.5 * np.sum((Ec @ self.Q) * Ec, axis=1) + 0.5 * np.sum((Tc @ self.Q) * Tc, axis=1)
                + np.sum((Ec @ self.P) * Tc, axis=1) + self.const)


def score_plda(model: PldaModel, enroll: np.ndarray, test: np.ndarray) -> float:
    enroll, test = np.asarray(enroll, float), np.asarray(test, float)
    if enroll.shape != (model.dim,) or test.shape != (model.dim,):
        raise FormatError(f"dimension mismatch: model d={model.dim}")
    return float(PldaScorer(model).pairs(enroll, test)[0])


def interpolate_plda(in_model: PldaModel, out_model: PldaModel, alpha: float = 0.5) -> PldaModel:
    """Convex combination ``alpha * in + (1 - alpha) * out`` of mean and covariances."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if in_model.dim != out_model.dim:
        raise FormatError(f"dimension mismatch: {in_model.dim} vs {out_model.dim}")
    if alpha == 1.0:
        return in_model
    if alpha == 0.0:
        return out_model
    mix = lambda a, b: alpha * a + (1.0 - alpha) * b  # noqa: E731
    return PldaModel(mix(in_model.mu, out_model.mu), _sym(mix(in_model.B, out_model.B)),
                     _sym(mix(in_model.W, out_model.W)))


def pseudo_label_plda(unlabeled: EmbeddingSet, K: int, out_model: PldaModel, alpha: float = 0.5,
                      iters: int = 10) -> PldaModel:
    """Cluster in-domain data with AHC, train PLDA on cluster ids, interpolate with ``out_model``."""
    from .cluster import ahc

    if alpha == 0.0:
        return out_model
    clusters = ahc(unlabeled, K)
    speakers = [f"c{clusters.labels[i]:05d}" for i in unlabeled.ids]
    in_model = train_plda(unlabeled.with_labels(speakers=speakers), iters=iters)
    return interpolate_plda(in_model, out_model, alpha)
