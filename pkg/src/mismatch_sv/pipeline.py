"""Declarative pipeline driver.

A pipeline config is JSON::

    {"workdir": "out", "seed": 7, "stages": [{"stage": "simulate", ...}, ...]}

Stages run in the listed order against a shared state of named embedding
sets plus the current registry, trials, enrollment models, PLDA model and
scores.  Each stage writes its artifacts to ``workdir/NN-<stage>/`` unless
intermediates are disabled.  See ``docs/pipeline.md`` for every stage's
parameters.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from . import core
from .cluster import (ClusteringResult, GenderModel, ahc, classify_gender, fit_gender_model,
                      gclc_two_step)
from .core import UNKNOWN, EmbeddingSet, FormatError, Gender, ScoreSet, TrialList
from .evalcal import (CalibrationModel, CostParams, derive_pseudo_trials, equalized_metric,
                      format_metrics, metrics_report, train_calibration, train_fusion, det_points)
from .plda import PldaModel, pseudo_label_plda, train_plda
from .preprocess import (apply_whiten, fit_nuisance_subspace, fit_whiten, length_normalize,
                         pca_subspace, remove_subspace)
from .scorenorm import COSINE, Cohort, glnorm, score_trials, snorm_with_cohort
from .simulator import SimConfig, generate_corpus, generate_protocol, random_shifts

log = logging.getLogger(__name__)


class StageError(FormatError):
    """Config validation failure, attributed to a stage."""

    def __init__(self, index: int, stage: str, message: str):
        super().__init__(f"stage {index} ({stage}): {message}")
        self.stage = stage


@dataclass
class State:
    sets: dict[str, EmbeddingSet] = field(default_factory=dict)
    truth: dict[str, EmbeddingSet] = field(default_factory=dict)  # labels hidden from unlabeled sets
    registry: dict[str, list[str]] | None = None
    trials: TrialList | None = None
    models: EmbeddingSet | None = None
    plda: PldaModel | None = None
    scores: dict[str, ScoreSet] = field(default_factory=dict)
    current: str | None = None
    normalizer: Callable[[ScoreSet, EmbeddingSet, EmbeddingSet], ScoreSet] | None = None
    backend: Any = None
    segments_name: str = "eval"
    outputs: dict[str, str] = field(default_factory=dict)


def _as_list(value) -> list[str]:
    if value is None:
        return []
    return [value] if isinstance(value, str) else list(value)


# ---------------------------------------------------------------- validation

def _requires(stage: Mapping[str, Any]) -> tuple[set[str], set[str]]:
    """Symbolic (requires, provides) for dependency checking."""
    kind = stage["stage"]
    p = stage
    if kind == "simulate":
        provides = {f"set:{n}" for n in p.get("corpora", {})}
        if "protocol" in p:
            provides |= {"registry", "trials", "key"}
        return set(), provides
    if kind == "load":
        provides = {f"set:{n}" for n in p.get("sets", {})}
        if "registry" in p:
            provides.add("registry")
        if "trials" in p:
            provides.add("trials")
        if "key" in p:
            provides |= {"trials", "key"}
        return set(), provides
    if kind in ("idvc", "ilvc"):
        req = {f"set:{n}" for n in _as_list(p.get("fit"))}
        if kind == "ilvc" and p.get("labels", "given") == "gclc":
            req |= {f"set:{n}" for n in _as_list(p.get("predict"))}
            req.add(f"set:{p.get('gender_from', 'train')}")
        return req, set()
    if kind == "whiten":
        return {f"set:{n}" for n in _as_list(p.get("fit"))}, set()
    if kind == "lengthnorm":
        return set(), set()
    if kind == "pool":
        return {"registry", f"set:{p.get('enroll', 'eval')}"}, {"models"}
    if kind == "plda-train":
        return {f"set:{p.get('set', 'train')}"}, {"plda"}
    if kind == "pseudo-label-plda":
        return {"plda", f"set:{p.get('set', 'unlabeled')}"}, {"plda"}
    if kind == "score":
        # without a pool stage the enrollment models are pooled from the segments
        req = {"models|registry", "trials", f"set:{p.get('segments', 'eval')}"}
        if p.get("backend", "plda") == "plda":
            req.add("plda")
        return req, {"scores", f"scores:{p.get('name', 'raw')}"}
    if kind == "snorm":
        return {"scores", f"set:{p.get('cohort', 'unlabeled')}"}, {"scores", f"scores:{p.get('name', 'snorm')}"}
    if kind == "glnorm":
        return ({"scores", f"set:{p.get('cohort', 'unlabeled')}", f"set:{p.get('gender_from', 'train')}"},
                {"scores", f"scores:{p.get('name', 'glnorm')}"})
    if kind == "calibrate":
        req = {"scores"}
        if p.get("source", "pseudo") == "key":
            req.add("key")
        else:
            req.add(f"set:{p.get('set', 'unlabeled')}")
        return req, {"scores", f"scores:{p.get('name', 'calibrated')}"}
    if kind == "fuse":
        return {"key"} | {f"scores:{n}" for n in _as_list(p.get("inputs"))}, {"scores", f"scores:{p.get('name', 'fused')}"}
    if kind == "metrics":
        req = {"scores", "key"}
        if p.get("scores"):
            req.add(f"scores:{p['scores']}")
        return req, set()
    raise KeyError(kind)


STAGES = ("simulate", "load", "idvc", "ilvc", "whiten", "lengthnorm", "pool", "plda-train",
          "pseudo-label-plda", "score", "snorm", "glnorm", "calibrate", "fuse", "metrics")

RANDOM_STAGES = {"simulate", "glnorm"}


def validate(config: Mapping[str, Any]) -> None:
    """Check stage names and data dependencies without running anything."""
    if not isinstance(config, Mapping):
        raise FormatError("pipeline config must be a JSON object")
    stages = config.get("stages")
    if not isinstance(stages, list) or not stages:
        raise FormatError("pipeline config needs a non-empty 'stages' list")
    have: set[str] = set()
    for i, stage in enumerate(stages):
        if not isinstance(stage, Mapping) or "stage" not in stage:
            raise StageError(i, "?", "every stage needs a 'stage' field")
        kind = stage["stage"]
        if kind not in STAGES:
            raise StageError(i, kind, f"unknown stage; expected one of {', '.join(STAGES)}")
        needs_seed = kind in RANDOM_STAGES or (kind == "ilvc" and stage.get("labels") == "gclc")
        if needs_seed and "seed" not in stage and "seed" not in config:
            raise StageError(i, kind, "stage is randomised and needs a 'seed' (stage or top level)")
        req, prov = _requires(stage)
        missing = sorted(r for r in req if not any(alt in have for alt in r.split("|")))
        if missing:
            raise StageError(i, kind, f"missing inputs {missing}; produce them in an earlier stage")
        have |= prov


# -------------------------------------------------------------------- stages

def _seed(stage, config) -> int:
    return int(stage.get("seed", config.get("seed")))


def _stage_simulate(state: State, p, config):
    seed = _seed(p, config)
    rng = np.random.default_rng(seed)
    dim = int(p["dim"])
    shifts = p.get("shifts", {})

    def make(kind, default_names):
        spec = shifts.get(kind, {n: 0.0 for n in default_names})
        out = {}
        for name, mag in spec.items():
            if isinstance(mag, (list, tuple)):
                out[name] = np.asarray(mag, float)
            else:
                out[name] = random_shifts([name], dim, float(mag), rng)[0][1] if mag else np.zeros(dim)
        return out

    lang = make("language", ["eng"])
    gen = make("gender", ["m", "f"])
    ds = make("dataset", [])
    for i, (name, c) in enumerate(p["corpora"].items()):
        langs = c.get("languages", list(lang))
        dsets = c.get("datasets", [])
        cfg = SimConfig(
            dim=dim, n_speakers=int(c["n_speakers"]),
            sessions_per_speaker=c.get("sessions", 10) if not isinstance(c.get("sessions"), list)
            else tuple(c["sessions"]),
            B_spec=p.get("B", 1.0), W_spec=p.get("W", 1.0),
            languages=[(l, lang[l]) for l in langs], genders=[(g, gen[g]) for g in gen],
            language_probs=c.get("language_probs"), gender_probs=c.get("gender_probs"),
            datasets=[(k, ds[k]) for k in dsets], dataset_probs=c.get("dataset_probs"),
            seed=int(rng.integers(2**63)), prefix=c.get("prefix", name[:3]),
        )
        data = generate_corpus(cfg)
        state.truth[name] = data
        if c.get("unlabeled", False):
            data = EmbeddingSet(data.ids, data.vectors)
        state.sets[name] = data
    if "protocol" in p:
        proto = p["protocol"]
        target = state.truth[proto.get("set", "eval")]
        reg, trials = generate_protocol(target, int(proto.get("enroll_sessions", 1)),
                                        int(proto["n_target"]), int(proto["n_nontarget"]),
                                        int(rng.integers(2**63)), bool(proto.get("same_language", False)))
        state.registry, state.trials = reg, trials


def _stage_load(state: State, p, config):
    base = config.get("_base", ".")
    path = lambda x: os.path.join(base, x)  # noqa: E731
    for name, files in p.get("sets", {}).items():
        labels = files.get("labels")
        state.sets[name] = core.load_embeddings(path(files["vectors"]), path(labels) if labels else None)
        state.truth[name] = state.sets[name]
    if "registry" in p:
        state.registry = core.load_registry(path(p["registry"]))
    if "key" in p:
        state.trials = core.load_trials(path(p["key"]))
        if state.trials.key is None:
            raise FormatError(f"{p['key']}: not a key file")
    elif "trials" in p:
        state.trials = core.load_trials(path(p["trials"]))


def _apply_all(state: State, fn):
    state.sets = {k: fn(v) for k, v in state.sets.items()}
    if state.models is not None:
        state.models = fn(state.models)


def _stage_subspace(state: State, p, config, default_grouping):
    grouping = p.get("grouping", default_grouping)
    fit_sets = [state.sets[n] for n in _as_list(p.get("fit"))]
    if p.get("labels", "given") == "gclc":
        gm = fit_gender_model(state.sets[p.get("gender_from", "train")])
        fit_sets += [_predict_labels(state.sets[n], gm, p, _seed(p, config))
                     for n in _as_list(p.get("predict"))]
    fit = EmbeddingSet.concat(fit_sets)
    model = fit_nuisance_subspace(fit, grouping, p.get("k"), p.get("center", "groups"))
    _apply_all(state, lambda s: remove_subspace(s, model))
    return {"subspace.txt": model.save}


def _predict_labels(data: EmbeddingSet, gm: GenderModel, p, seed) -> EmbeddingSet:
    genders = classify_gender(data, gm)
    res = _language_clusters(data, p, seed)
    return data.with_labels(genders=[genders[i] for i in data.ids],
                            languages=[f"L{res.labels[i]}" for i in data.ids])


def _language_clusters(data: EmbeddingSet, p, seed) -> ClusteringResult:
    K = int(p.get("k_languages", 2))
    mode = p.get("init", "ahc")
    sub = pca_subspace(data, int(p.get("pca_dims", 1))) if mode == "subspace" else None
    return gclc_two_step(data, K, mode, sub, seed=seed)


def _stage_whiten(state: State, p, config):
    model = fit_whiten(EmbeddingSet.concat([state.sets[n] for n in _as_list(p.get("fit"))]),
                       p.get("ridge"))
    _apply_all(state, lambda s: apply_whiten(s, model))
    return {"whiten.txt": model.save}


def _stage_lengthnorm(state: State, p, config):
    _apply_all(state, length_normalize)


def _stage_pool(state: State, p, config):
    state.models = core.build_enrollment_models(state.sets[p.get("enroll", "eval")], state.registry)
    return {"models.vec": lambda f: core.save_embeddings(state.models, f)}


def _stage_plda_train(state: State, p, config):
    state.plda = train_plda(state.sets[p.get("set", "train")], int(p.get("iters", 10)))
    return {"plda.txt": state.plda.save}


def _stage_pseudo_plda(state: State, p, config):
    state.plda = pseudo_label_plda(state.sets[p.get("set", "unlabeled")], int(p["k"]), state.plda,
                                   float(p.get("alpha", 0.5)), int(p.get("iters", 10)))
    return {"plda.txt": state.plda.save}


def _backend(state: State, p):
    return state.plda if p.get("backend", "plda") == "plda" else COSINE


def _set_scores(state: State, name: str, scores: ScoreSet):
    state.scores[name] = scores
    state.current = name
    return {f"{name}.scores": lambda f: core.save_scores(scores, f)}


def _stage_score(state: State, p, config):
    backend = _backend(state, p)
    state.backend = backend
    segments = state.sets[p.get("segments", "eval")]
    state.segments_name = p.get("segments", "eval")
    state.normalizer = None
    files = {}
    if state.models is None:
        state.models = core.build_enrollment_models(segments, state.registry)
        files["models.vec"] = lambda f: core.save_embeddings(state.models, f)
    files.update(_set_scores(state, p.get("name", "raw"),
                             score_trials(backend, state.models, segments, state.trials)))
    return files


def _stage_snorm(state: State, p, config):
    cohort = state.sets[p.get("cohort", "unlabeled")]
    backend = state.backend
    kwargs = {"top_n": p.get("top_n"), "fallback": bool(p.get("fallback", False))}

    def normalizer(raw, models, segments):
        return snorm_with_cohort(raw, backend, models, segments, cohort, **kwargs)

    state.normalizer = normalizer
    raw = state.scores[state.current]
    return _set_scores(state, p.get("name", "snorm"),
                       normalizer(raw, state.models, state.sets[state.segments_name]))


def _stage_glnorm(state: State, p, config):
    cohort_set = state.sets[p.get("cohort", "unlabeled")]
    gm = fit_gender_model(state.sets[p.get("gender_from", "train")])
    segments = state.sets[state.segments_name]
    pool = EmbeddingSet.concat([
        cohort_set,
        state.models.subset([i for i in state.models.ids if i not in cohort_set]),
        segments.subset([i for i in segments.ids if i not in cohort_set]),
    ])
    clusters = _language_clusters(pool, p, _seed(p, config))
    centroids = clusters.centroids

    def categorize(data: EmbeddingSet) -> dict[str, tuple[str, str]]:
        genders = classify_gender(data, gm)
        d2 = ((data.vectors[:, None, :] - centroids[None]) ** 2).sum(-1)
        langs = d2.argmin(axis=1)
        return {i: (genders[i].value, f"L{l}") for i, l in zip(data.ids, langs)}

    cohort = Cohort(cohort_set, categorize(cohort_set))
    backend = state.backend
    kwargs = {"fallback": bool(p.get("fallback", False))}

    def normalizer(raw, models, segs):
        cats = {**categorize(models), **categorize(segs)}
        return glnorm(raw, cohort, backend, models, segs, cats, **kwargs)

    state.normalizer = normalizer
    raw = state.scores[state.current]
    out = _set_scores(state, p.get("name", "glnorm"), normalizer(raw, state.models, segments))
    cats = {**cohort.category, **categorize(state.models), **categorize(segments)}
    labelled = pool.with_labels(genders=[Gender(cats[i][0]) for i in pool.ids],
                                languages=[cats[i][1] for i in pool.ids])
    out["categories.lab"] = lambda f: core.save_labels(labelled, f)
    return out


def _stage_calibrate(state: State, p, config):
    params = CostParams(tuple(p.get("priors", (0.01, 0.005))))
    prior = float(p.get("prior", params.effective_prior))
    current = state.scores[state.current]
    files = {}
    if p.get("source", "pseudo") == "key":
        train = current
    else:
        unl = state.sets[p.get("set", "unlabeled")]
        clusters = ahc(unl, int(p["k"]))
        pmodels, ptrials = derive_pseudo_trials(unl, clusters)
        train = score_trials(state.backend, pmodels, unl, ptrials)
        if state.normalizer is not None:
            train = state.normalizer(train, pmodels, unl)
        files["pseudo.key"] = lambda f: core.save_key(ptrials, f)
    model = train_calibration(train, prior)
    files["calibration.txt"] = model.save
    files.update(_set_scores(state, p.get("name", "calibrated"), model.apply(current)))
    return files


def _stage_fuse(state: State, p, config):
    inputs = [state.scores[n] for n in _as_list(p["inputs"])]
    params = CostParams(tuple(p.get("priors", (0.01, 0.005))))
    model = train_fusion(inputs, float(p.get("prior", params.effective_prior)), float(p.get("l2", 1e-4)))
    out = {"fusion.txt": model.save}
    out.update(_set_scores(state, p.get("name", "fused"), model.fuse(inputs)))
    return out


def _stage_metrics(state: State, p, config):
    scores = state.scores[p.get("scores") or state.current]
    scores = ScoreSet(state.trials, scores.scores) if scores.trials.key is None else scores
    params = CostParams(tuple(p.get("priors", (0.01, 0.005))))
    values = metrics_report(scores, params)
    if p.get("partition"):
        truth = state.truth[p.get("partition_set", state.segments_name)]
        keys = p["partition"]
        cells = []
        for m, _ in scores.trials.trials:
            seg = state.registry[m][0]
            i = truth.index(seg)
            cells.append("|".join(truth.labels(k)[i] for k in keys))
        for name in ("eer", "min_cprimary", "act_cprimary"):
            v = equalized_metric(scores, cells, name, params)
            values[f"equalized_{name}"] = 100.0 * v if name == "eer" else v
    text = format_metrics(values)
    state.outputs["metrics"] = text
    tar, non = scores.split()
    thr, p_miss, p_fa = det_points(tar, non)

    def write_det(f):
        with open(f, "w", encoding="utf-8", newline="\n") as fh:
            for a, b in zip(p_fa, p_miss):
                fh.write(f"{a:.6f}\t{b:.6f}\n")

    def write_metrics(f):
        with open(f, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)

    return {"metrics.txt": write_metrics, "det.txt": write_det}


HANDLERS = {
    "simulate": _stage_simulate, "load": _stage_load,
    "idvc": lambda s, p, c: _stage_subspace(s, p, c, ["dataset", "gender"]),
    "ilvc": lambda s, p, c: _stage_subspace(s, p, c, ["language", "gender"]),
    "whiten": _stage_whiten, "lengthnorm": _stage_lengthnorm, "pool": _stage_pool,
    "plda-train": _stage_plda_train, "pseudo-label-plda": _stage_pseudo_plda,
    "score": _stage_score, "snorm": _stage_snorm, "glnorm": _stage_glnorm,
    "calibrate": _stage_calibrate, "fuse": _stage_fuse, "metrics": _stage_metrics,
}


def _write_sets(state: State, outdir: str, stage: str):
    if stage in ("simulate", "load"):
        for name, data in state.truth.items():
            core.save_embeddings(data, os.path.join(outdir, f"{name}.vec"),
                                 os.path.join(outdir, f"{name}.lab"))
        if state.registry is not None:
            core.save_registry(state.registry, os.path.join(outdir, "registry.txt"))
        if state.trials is not None:
            if state.trials.key is not None:
                core.save_key(state.trials, os.path.join(outdir, "key.txt"))
            core.save_trials(state.trials, os.path.join(outdir, "trials.txt"))
    elif stage in ("idvc", "ilvc", "whiten", "lengthnorm"):
        for name, data in state.sets.items():
            core.save_embeddings(data, os.path.join(outdir, f"{name}.vec"))


def run_pipeline(config: Mapping[str, Any], workdir: str | None = None,
                 intermediates: bool = True) -> State:
    """Validate then execute every stage in order; returns the final state."""
    validate(config)
    workdir = workdir or config.get("workdir", "pipeline-out")
    intermediates = intermediates and config.get("intermediates", True)
    os.makedirs(workdir, exist_ok=True)
    state = State()
    for i, stage in enumerate(config["stages"]):
        kind = stage["stage"]
        log.info("stage %d: %s", i, kind)
        files = HANDLERS[kind](state, stage, config) or {}
        final = kind == "metrics"
        if intermediates or final:
            outdir = os.path.join(workdir, f"{i:02d}-{kind}")
            os.makedirs(outdir, exist_ok=True)
            if intermediates:
                _write_sets(state, outdir, kind)
            for name, writer in files.items():
                if intermediates or name in ("metrics.txt", "det.txt"):
                    writer(os.path.join(outdir, name))
            if final:
                state.outputs["metrics_path"] = os.path.join(outdir, "metrics.txt")
    return state


def load_config(path: str) -> dict[str, Any]:
    with open(path, encoding="utf-8") as f:
        try:
            config = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON: {exc}") from None
    if isinstance(config, dict):
        config.setdefault("_base", os.path.dirname(os.path.abspath(path)))
    return config
