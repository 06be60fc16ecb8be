"""Synthetic corpora shared by the unit and acceptance tests."""

from dataclasses import dataclass

import numpy as np

from mismatch_sv.cluster import classify_gender, fit_gender_model, gclc_two_step
from mismatch_sv.core import EmbeddingSet, ScoreSet, TrialList, build_enrollment_models
from mismatch_sv.plda import PldaModel, train_plda
from mismatch_sv.preprocess import (apply_whiten, fit_nuisance_subspace, fit_whiten,
                                    length_normalize, remove_subspace)
from mismatch_sv.scorenorm import Cohort, glnorm, predict_categories, score_trials, snorm_with_cohort
from mismatch_sv.simulator import SimConfig, generate_corpus, generate_protocol, random_shifts


def two_language_corpus(n_speakers=300, sessions=4, seed=0, dim=16, ratio=2.0):
    """Two languages whose means sit at +/- ratio/2 * sigma per coordinate.

    ``sigma`` is the within-language standard deviation per coordinate
    (speaker plus session variance), so the per-coordinate gap between the
    language means is ``ratio * sigma``.  Returns the set and the true
    language index per record.
    """
    B, W = 0.75, 0.25
    sigma = np.sqrt(B + W)
    half = 0.5 * ratio * sigma * np.ones(dim)
    cfg = SimConfig(dim=dim, n_speakers=n_speakers, sessions_per_speaker=sessions, B_spec=B, W_spec=W,
                    languages=(("L0", tuple(-half)), ("L1", tuple(half))), seed=seed)
    data = generate_corpus(cfg)
    truth = np.array([0 if lang == "L0" else 1 for lang in data.languages])
    return data, truth


@dataclass
class MismatchWorld:
    """Out-of-domain English training data plus an in-domain two-language world."""

    train: EmbeddingSet
    unlabeled: EmbeddingSet
    evaluation: EmbeddingSet
    registry: dict
    trials: TrialList


def mismatch_world(seed, dim=32, lang_shift=8.0, n_eval=100, n_target=300, n_nontarget=3000,
                   cohort_probs=None, n_unlabeled=200, unlabeled_sessions=4):
    """Train (eng, five datasets) vs. in-domain (two shifted languages).

    Nontarget trials pair speakers of the same language, which is the hard
    case where a language offset inflates nontarget scores.
    """
    rng = np.random.default_rng(seed)
    langs = random_shifts(["eng", "cmn", "yue"], dim, lang_shift, rng, zero_first=True)
    genders = random_shifts(["m", "f"], dim, 1.0, rng)
    datasets = random_shifts([f"ds{i}" for i in range(5)], dim, 1.0, rng)
    B = np.diag(np.linspace(2.0, 0.2, dim))
    W = np.diag(np.linspace(0.5, 1.0, dim))
    base = dict(dim=dim, B_spec=B, W_spec=W, genders=tuple(genders))
    train = generate_corpus(SimConfig(n_speakers=300, sessions_per_speaker=8, languages=(langs[0],),
                                      datasets=tuple(datasets), seed=seed * 10 + 1, prefix="tr", **base))
    unlabeled = generate_corpus(SimConfig(n_speakers=n_unlabeled, sessions_per_speaker=unlabeled_sessions,
                                          languages=tuple(langs[1:]), language_probs=cohort_probs,
                                          seed=seed * 10 + 2, prefix="un", **base))
    evaluation = generate_corpus(SimConfig(n_speakers=n_eval, sessions_per_speaker=4,
                                           languages=tuple(langs[1:]), seed=seed * 10 + 3,
                                           prefix="ev", **base))
    registry, trials = generate_protocol(evaluation, 1, n_target, n_nontarget, seed, same_language=True)
    return MismatchWorld(train, unlabeled, evaluation, registry, trials)


def backend_scores(world, use_ilvc):
    """IDVC (+ optional ILVC) -> whitening/length-norm on in-domain data -> PLDA.

    Returns the raw scores with everything needed to normalise them.
    """
    sets = {"train": world.train, "unl": world.unlabeled, "eval": world.evaluation}
    idvc = fit_nuisance_subspace(world.train, ["dataset", "gender"])
    sets = {k: remove_subspace(v, idvc) for k, v in sets.items()}
    if use_ilvc:
        labelled = EmbeddingSet.concat([sets["train"], sets["unl"]])
        ilvc = fit_nuisance_subspace(labelled, ["language", "gender"])
        sets = {k: remove_subspace(v, ilvc) for k, v in sets.items()}
    whiten = fit_whiten(sets["unl"])
    sets = {k: length_normalize(apply_whiten(v, whiten)) for k, v in sets.items()}
    plda = train_plda(sets["train"], iters=10)
    models = build_enrollment_models(sets["eval"], world.registry)
    raw = score_trials(plda, models, sets["eval"], world.trials)
    return raw, plda, models, sets


def gclc_categories(sets, models, seed=0):
    """Predicted (gender, language-cluster) for cohort, models and segments."""
    gender_model = fit_gender_model(sets["train"])
    pool = EmbeddingSet.concat([sets["unl"], models, sets["eval"]])
    genders = classify_gender(pool, gender_model)
    languages = gclc_two_step(pool, 2, "ahc", seed=seed).labels
    return predict_categories(pool, genders, languages)


def norm_comparison(world, seed=0):
    """Raw, S-normed and GL-normed scores for one world."""
    raw, plda, models, sets = backend_scores(world, use_ilvc=False)
    sn = snorm_with_cohort(raw, plda, models, sets["eval"], sets["unl"])
    categories = gclc_categories(sets, models, seed)
    cohort = Cohort(sets["unl"], {i: categories[i] for i in sets["unl"].ids})
    gl = glnorm(raw, cohort, plda, models, sets["eval"], categories)
    return raw, sn, gl


def gaussian_llr_scores(n_target, n_nontarget, separation, rng, shift=0.0, scale=1.0):
    """Scores that are exact LLRs of N(+m, 1) vs N(-m, 1), optionally distorted."""
    m = separation / 2.0
    tar = rng.normal(m, 1.0, n_target)
    non = rng.normal(-m, 1.0, n_nontarget)
    llr = lambda x: 2.0 * m * x  # noqa: E731
    values = np.concatenate([llr(tar), llr(non)]) * scale + shift
    trials = tuple((f"m{i}", f"s{i}") for i in range(values.size))
    key = (True,) * n_target + (False,) * n_nontarget
    return ScoreSet(TrialList(trials, key), values)


def random_plda(dim, rng):
    A = rng.normal(size=(dim, dim))
    C = rng.normal(size=(dim, dim))
    return PldaModel(rng.normal(size=dim), A @ A.T / dim + 0.5 * np.eye(dim), C @ C.T / dim + 0.2 * np.eye(dim))
