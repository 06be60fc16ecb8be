"""Detection metrics, linear logistic calibration/fusion and pseudo-trials
derived from cluster labels.

C_primary uses unit costs, miss-normalised detection cost averaged over the
target priors ``(0.01, 0.005)``.  A trial is accepted when ``score >= threshold``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import EmbeddingSet, FormatError, NumericalError, ScoreSet, TrialList, \
    parse_header


@dataclass(frozen=True)
class CostParams:
    p_targets: tuple[float, ...] = (0.01, 0.005)
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "p_targets", tuple(float(p) for p in self.p_targets))
        if not self.p_targets or any(not 0.0 < p < 1.0 for p in self.p_targets):
            raise ValueError(f"priors must lie in (0, 1): {self.p_targets}")

    @property
    def effective_prior(self) -> float:
        return float(np.mean(self.p_targets))


def _split(scores: ScoreSet) -> tuple[np.ndarray, np.ndarray]:
    tar, non = scores.split()
    if tar.size == 0 or non.size == 0:
        raise FormatError("metrics need at least one target and one nontarget trial")
    return tar, non


def det_points(tar: np.ndarray, non: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, p_miss, p_fa) for every distinct score plus ``+inf``.

    At threshold ``t``: ``p_miss = #(tar < t)/Nt`` and ``p_fa = #(non >= t)/Nn``.
    Thresholds increase, so ``p_miss`` rises from 0 and ``p_fa`` falls to 0.
    """
    tar = np.sort(np.asarray(tar, float))
    non = np.sort(np.asarray(non, float))
    thr = np.unique(np.concatenate([tar, non]))
    thr = np.append(thr, np.inf)
    p_miss = np.searchsorted(tar, thr, side="left") / tar.size
    p_fa = (non.size - np.searchsorted(non, thr, side="left")) / non.size
    return thr, p_miss, p_fa


def _eer_from_curve(p_miss: np.ndarray, p_fa: np.ndarray) -> float:
    # first crossing; k >= 1 because the curve starts at (miss=0, fa=1) and ends at (1, 0)
    k = int(np.argmax(p_miss >= p_fa))
    if p_miss[k] == p_fa[k]:
        return float(p_miss[k])
    m0, m1 = p_miss[k - 1], p_miss[k]
    a0, a1 = p_fa[k - 1], p_fa[k]
    t = (a0 - m0) / ((m1 - m0) - (a1 - a0))
    return float(m0 + t * (m1 - m0))


def eer(scores: ScoreSet) -> float:
    """Equal error rate with linear interpolation between adjacent DET points."""
    _, p_miss, p_fa = det_points(*_split(scores))
    return _eer_from_curve(p_miss, p_fa)


def _costs(p_miss, p_fa, p, params: CostParams):
    beta = params.c_fa * (1.0 - p) / (params.c_miss * p)
    return p_miss + beta * p_fa


def min_cprimary(scores: ScoreSet, params: CostParams = CostParams()) -> float:
    _, p_miss, p_fa = det_points(*_split(scores))
    return float(np.mean([_costs(p_miss, p_fa, p, params).min() for p in params.p_targets]))


def bayes_threshold(p: float, params: CostParams = CostParams()) -> float:
    return float(np.log(params.c_fa * (1.0 - p) / (params.c_miss * p)))


def act_cprimary(calibrated: ScoreSet, params: CostParams = CostParams()) -> float:
    tar, non = _split(calibrated)
    values = []
    for p in params.p_targets:
        theta = bayes_threshold(p, params)
        values.append(_costs(np.mean(tar < theta), np.mean(non >= theta), p, params))
    return float(np.mean(values))


METRICS: dict[str, Callable[..., float]] = {
    "eer": eer, "min_cprimary": min_cprimary, "act_cprimary": act_cprimary,
}


def equalized_metric(scores: ScoreSet, partition: Sequence | Mapping, metric: str = "eer",
                     params: CostParams | None = None) -> float:
    """Unweighted mean of ``metric`` computed separately in each partition cell.

    ``partition`` is either a sequence aligned with the trials or a mapping
    from ``(model_id, segment_id)`` to a category.
    """
    if isinstance(partition, Mapping):
        try:
            partition = [partition[t] for t in scores.trials.trials]
        except KeyError as exc:
            raise FormatError(f"trial {exc.args[0]} has no partition cell") from None
    if len(partition) != len(scores):
        raise FormatError("partition length does not match trial count")
    fn = METRICS[metric]
    extra = () if metric == "eer" else (params or CostParams(),)
    key = scores.trials.key_array()
    cells = np.array([str(c) for c in partition])
    values = []
    for cell in sorted(set(cells)):
        mask = cells == cell
        if key[mask].all() or not key[mask].any():
            raise FormatError(f"partition cell {cell!r} lacks a target or nontarget trial")
        trials = TrialList(tuple(t for t, m in zip(scores.trials.trials, mask) if m), tuple(key[mask]))
        values.append(fn(ScoreSet(trials, scores.scores[mask]), *extra))
    return float(np.mean(values))


# --------------------------------------------------------------- calibration

def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _objective(theta, X, y, weights, offset, l2):
    z = X @ theta[:-1] + theta[-1] + offset
    # y=1 targets: -log sigmoid(z) = softplus(-z); y=0: softplus(z)
    loss = np.where(y, _softplus(-z), _softplus(z))
    value = float(weights @ loss + l2 * theta[:-1] @ theta[:-1])
    r = weights * (_sigmoid(z) - y)  # d loss / dz
    Xa = np.hstack([X, np.ones((X.shape[0], 1))])
    grad = Xa.T @ r
    grad[:-1] += 2.0 * l2 * theta[:-1]
    h = weights * _sigmoid(z) * _sigmoid(-z)
    hess = (Xa * h[:, None]).T @ Xa
    hess[np.arange(X.shape[1]), np.arange(X.shape[1])] += 2.0 * l2
    return value, grad, hess


def _class_weights(key: np.ndarray, prior: float) -> np.ndarray:
    nt, nn = key.sum(), (~key).sum()
    return np.where(key, prior / nt, (1.0 - prior) / nn)


def train_logistic(X: np.ndarray, key: np.ndarray, prior: float, l2: float = 0.0,
                   init: np.ndarray | None = None, gtol: float = 1e-8,
                   max_iter: int = 200) -> np.ndarray:
    """Prior-weighted logistic regression by damped Newton; returns ``[w..., b]``.

    The model output ``X @ w + b`` is a log-likelihood ratio: the prior log-odds
    enter as a fixed offset during training only.
    """
    X = np.atleast_2d(np.asarray(X, float))
    key = np.asarray(key, bool)
    if key.all() or not key.any():
        raise FormatError("calibration needs both target and nontarget trials")
    if not np.all(np.isfinite(X)):
        raise NumericalError("non-finite scores")
    if not 0.0 < prior < 1.0:
        raise ValueError(f"effective prior must lie in (0, 1), got {prior}")
    weights = _class_weights(key, prior)
    offset = _logit(prior)
    theta = np.zeros(X.shape[1] + 1) if init is None else np.array(init, float)
    value, grad, hess = _objective(theta, X, key, weights, offset, l2)
    for _ in range(max_iter):
        try:
            step = np.linalg.solve(hess + 1e-12 * np.eye(hess.shape[0]), grad)
        except np.linalg.LinAlgError:
            step = grad
        # the objective can be very flat, so a small gradient alone does not pin
        # the parameters; keep taking (cheap, quadratically convergent) Newton
        # steps until the step itself is negligible as well
        if np.linalg.norm(grad) <= gtol and np.linalg.norm(step) <= 1e-10 * (1.0 + np.linalg.norm(theta)):
            break
        t = 1.0
        while True:
            cand = theta - t * step
            cv, cg, ch = _objective(cand, X, key, weights, offset, l2)
            if cv <= value - 1e-4 * t * (grad @ step) or t < 1e-10:
                break
            t *= 0.5
        if cv > value:  # no descent possible at machine precision
            break
        theta, value, grad, hess = cand, cv, cg, ch
    return theta


def cross_entropy(scores: np.ndarray, key: np.ndarray, prior: float) -> float:
    """Prior-weighted logistic loss (nats) of LLR scores; the calibration objective."""
    key = np.asarray(key, bool)
    z = np.asarray(scores, float) + _logit(prior)
    loss = np.where(key, _softplus(-z), _softplus(z))
    return float(_class_weights(key, prior) @ loss)


@dataclass(frozen=True)
class CalibrationModel:
    a: float
    b: float

    def __call__(self, scores):
        return self.a * np.asarray(scores, float) + self.b

    def apply(self, scores: ScoreSet) -> ScoreSet:
        return scores.with_scores(self(scores.scores))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(f"calibration a={self.a!r} b={self.b!r}\n")

    @classmethod
    def load(cls, path) -> "CalibrationModel":
        with open(path, encoding="utf-8") as f:
            head = parse_header(f.readline(), "calibration", path)
        return cls(float(head["a"]), float(head["b"]))


@dataclass(frozen=True)
class FusionModel:
    weights: np.ndarray
    bias: float

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, float))
        if w.size < 1 or not np.all(np.isfinite(w)) or not np.isfinite(self.bias):
            raise NumericalError("fusion weights must be finite and non-empty")
        object.__setattr__(self, "weights", w)

    def fuse(self, subsystems: Sequence[ScoreSet]) -> ScoreSet:
        check_aligned(subsystems)
        if len(subsystems) != self.weights.size:
            raise FormatError(f"fusion expects {self.weights.size} subsystems, got {len(subsystems)}")
        S = np.stack([s.scores for s in subsystems], axis=1)
        return subsystems[0].with_scores(S @ self.weights + self.bias)

    def save(self, path) -> None:
        w = ",".join(repr(float(x)) for x in self.weights)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(f"fusion m={self.weights.size} w={w} b={self.bias!r}\n")

    @classmethod
    def load(cls, path) -> "FusionModel":
        with open(path, encoding="utf-8") as f:
            head = parse_header(f.readline(), "fusion", path)
        w = np.array([float(x) for x in head["w"].split(",")])
        if w.size != int(head["m"]):
            raise FormatError(f"{path}: m={head['m']} but {w.size} weights")
        return cls(w, float(head["b"]))


def train_calibration(scores: ScoreSet, effective_prior: float | None = None,
                      init: Sequence[float] | None = None) -> CalibrationModel:
    prior = CostParams().effective_prior if effective_prior is None else effective_prior
    key = scores.trials.key_array()
    a, b = train_logistic(scores.scores[:, None], key, prior, 0.0, init)
    return CalibrationModel(float(a), float(b))


def check_aligned(subsystems: Sequence[ScoreSet]) -> None:
    if not subsystems:
        raise FormatError("no subsystem scores given")
    ref = subsystems[0].trials.trials
    for j, s in enumerate(subsystems[1:], 1):
        other = s.trials.trials
        if len(other) != len(ref):
            raise FormatError(f"subsystem {j} has {len(other)} trials, expected {len(ref)}")
        for k, (x, y) in enumerate(zip(ref, other)):
            if x != y:
                raise FormatError(f"subsystem {j} misaligned at trial {k}: {y} != {x}")


def train_fusion(subsystems: Sequence[ScoreSet], effective_prior: float | None = None,
                 l2: float = 1e-4) -> FusionModel:
    """Linear logistic-regression fusion of aligned subsystem scores."""
    check_aligned(subsystems)
    prior = CostParams().effective_prior if effective_prior is None else effective_prior
    key = subsystems[0].trials.key_array()
    S = np.stack([s.scores for s in subsystems], axis=1)
    theta = train_logistic(S, key, prior, l2)
    return FusionModel(theta[:-1], float(theta[-1]))


# ---------------------------------------------------------------- pseudo-trials

def derive_pseudo_trials(unlabeled: EmbeddingSet, clusters) -> tuple[EmbeddingSet, TrialList]:
    """Cluster-mean models scored against every clustered vector.

    Returns one length-normalised model per cluster and the full cross of
    models x vectors keyed TARGET when the vector belongs to the cluster.
    """
    K = clusters.K
    if K < 2:
        raise FormatError("pseudo-trials need at least 2 clusters")
    labels = clusters.label_array(unlabeled.ids)
    counts = np.bincount(labels, minlength=K)
    if np.any(counts == 0):
        raise FormatError(f"cluster {int(np.argmin(counts))} is empty")
    means = np.zeros((K, unlabeled.dim))
    np.add.at(means, labels, unlabeled.vectors)
    means /= counts[:, None]
    norms = np.linalg.norm(means, axis=1)
    if np.any(norms == 0):
        raise NumericalError("a cluster mean has zero norm")
    model_ids = [f"cluster{c:05d}" for c in range(K)]
    models = EmbeddingSet(model_ids, means / norms[:, None])
    trials = tuple((model_ids[c], seg) for c in range(K) for seg in unlabeled.ids)
    key = tuple(bool(labels[i] == c) for c in range(K) for i in range(len(unlabeled)))
    return models, TrialList(trials, key)


def metrics_report(scores: ScoreSet, params: CostParams = CostParams()) -> dict[str, float]:
    return {"eer": 100.0 * eer(scores), "min_cprimary": min_cprimary(scores, params),
            "act_cprimary": act_cprimary(scores, params)}


def format_metrics(values: Mapping[str, float]) -> str:
    return "".join(f"{name}\t{value:.4f}\n" for name, value in values.items())
