"""Synthetic i-vector corpora drawn from the two-covariance generative model,
with additive language, gender and dataset mean shifts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .core import EmbeddingSet, FormatError, Gender, TrialList

_GENDER_ALIASES = {"m": Gender.MALE, "male": Gender.MALE, "f": Gender.FEMALE, "female": Gender.FEMALE}


def covariance(spec, dim: int) -> np.ndarray:
    """Build a covariance matrix from a scalar (``s*I``), a diagonal, or a full matrix."""
    arr = np.asarray(spec, dtype=np.float64)
    if arr.ndim == 0:
        cov = float(arr) * np.eye(dim)
    elif arr.ndim == 1:
        if arr.shape[0] != dim:
            raise FormatError(f"diagonal covariance has length {arr.shape[0]}, expected {dim}")
        cov = np.diag(arr)
    elif arr.shape == (dim, dim):
        cov = arr
    else:
        raise FormatError(f"covariance spec of shape {arr.shape} does not fit d={dim}")
    if not np.allclose(cov, cov.T):
        raise FormatError("covariance spec is not symmetric")
    if np.linalg.eigvalsh(cov)[0] < 0:
        raise FormatError("covariance spec is not positive semi-definite")
    return cov


def _sampler(cov: np.ndarray) -> np.ndarray:
    """Matrix ``L`` with ``L L^T = cov``; works for PSD (including zero) covariances."""
    evals, evecs = np.linalg.eigh(cov)
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


@dataclass(frozen=True)
class SimConfig:
    dim: int
    n_speakers: int
    sessions_per_speaker: int | tuple[int, int] = 10
    B_spec: Any = 1.0
    W_spec: Any = 1.0
    languages: Sequence[tuple[str, Sequence[float]]] = (("eng", None),)
    genders: Sequence[tuple[str, Sequence[float]]] = (("m", None), ("f", None))
    language_probs: Sequence[float] | None = None
    gender_probs: Sequence[float] | None = None
    datasets: Sequence[tuple[str, Sequence[float]]] = ()
    dataset_probs: Sequence[float] | None = None
    seed: int = 0
    prefix: str = "spk"
    heavy_tailed_dof: float | None = None  # robustness option: Student-t sessions

    def __post_init__(self):
        if self.dim < 1 or self.n_speakers < 1:
            raise FormatError("dim and n_speakers must be positive")
        lo, hi = self.session_range
        if lo < 1 or hi < lo:
            raise FormatError(f"bad session range {self.sessions_per_speaker}")
        for name, items, probs in (("language", self.languages, self.language_probs),
                                   ("gender", self.genders, self.gender_probs),
                                   ("dataset", self.datasets, self.dataset_probs)):
            if name != "dataset" and not items:
                raise FormatError(f"at least one {name} required")
            if probs is not None:
                if len(probs) != len(items) or abs(sum(probs) - 1.0) > 1e-9 or min(probs) < 0:
                    raise FormatError(f"{name} probabilities must match and sum to 1")
        covariance(self.B_spec, self.dim)
        covariance(self.W_spec, self.dim)

    @property
    def session_range(self) -> tuple[int, int]:
        s = self.sessions_per_speaker
        return (s, s) if isinstance(s, int) else (int(s[0]), int(s[1]))

    @classmethod
    def from_dict(cls, cfg: Mapping[str, Any], **overrides) -> "SimConfig":
        """Build from JSON-style data; shift lists are ``[[name, vector-or-null], ...]``
        or ``{name: vector-or-null}``."""
        cfg = {**cfg, **overrides}

        def pairs(value):
            if value is None:
                return ()
            if isinstance(value, Mapping):
                value = list(value.items())
            return tuple((str(n), None if v is None else tuple(v)) for n, v in value)

        kw = dict(cfg)
        for key in ("languages", "genders", "datasets"):
            if key in kw:
                kw[key] = pairs(kw[key])
        if isinstance(kw.get("sessions_per_speaker"), list):
            kw["sessions_per_speaker"] = tuple(kw["sessions_per_speaker"])
        unknown = set(kw) - set(cls.__dataclass_fields__)
        if unknown:
            raise FormatError(f"unknown simulator config keys: {sorted(unknown)}")
        return cls(**kw)


def _shift(vec, dim: int) -> np.ndarray:
    if vec is None:
        return np.zeros(dim)
    arr = np.asarray(vec, dtype=np.float64)
    if arr.shape != (dim,):
        raise FormatError(f"shift vector has shape {arr.shape}, expected ({dim},)")
    return arr


def _choose(rng, n_items, probs):
    if n_items == 1:
        return 0
    return int(rng.choice(n_items, p=probs))


def generate_corpus(config: SimConfig) -> EmbeddingSet:
    """Draw a fully labelled corpus.

    Per speaker: gender, language (and dataset, if configured) are drawn,
    then ``y ~ N(shift_language + shift_gender + shift_dataset, B)``.
    Per session: ``w ~ N(y, W)``.  Deterministic in ``config.seed``.
    """
    d = config.dim
    rng = np.random.default_rng(config.seed)
    LB = _sampler(covariance(config.B_spec, d))
    LW = _sampler(covariance(config.W_spec, d))
    lang_shift = [_shift(v, d) for _, v in config.languages]
    gen_shift = [_shift(v, d) for _, v in config.genders]
    ds_shift = [_shift(v, d) for _, v in config.datasets]
    lo, hi = config.session_range
    width = len(str(config.n_speakers))
    ids, rows, speakers, genders, languages, datasets = [], [], [], [], [], []
    for s in range(config.n_speakers):
        g = _choose(rng, len(config.genders), config.gender_probs)
        l = _choose(rng, len(config.languages), config.language_probs)
        k = _choose(rng, len(config.datasets), config.dataset_probs) if config.datasets else None
        center = lang_shift[l] + gen_shift[g] + (ds_shift[k] if k is not None else 0.0)
        y = center + LB @ rng.standard_normal(d)
        n = int(rng.integers(lo, hi + 1))
        noise = rng.standard_normal((n, d)) @ LW.T
        if config.heavy_tailed_dof:
            noise /= np.sqrt(rng.chisquare(config.heavy_tailed_dof, size=(n, 1)) / config.heavy_tailed_dof)
        spk = f"{config.prefix}{s:0{width}d}"
        gname = config.genders[g][0]
        for j in range(n):
            ids.append(f"{spk}-{j:03d}")
            rows.append(y + noise[j])
            speakers.append(spk)
            genders.append(_GENDER_ALIASES.get(gname.lower(), Gender.UNKNOWN))
            languages.append(config.languages[l][0])
            datasets.append(config.datasets[k][0] if k is not None else "-")
    return EmbeddingSet(ids, np.array(rows).reshape(len(ids), d), speakers, genders,
                        languages, datasets, dim=d)


def generate_protocol(data: EmbeddingSet, enroll_sessions: int, n_target: int, n_nontarget: int,
                      seed: int, same_language: bool = False) -> tuple[dict[str, list[str]], TrialList]:
    """Split each speaker's sessions into enrollment and test, then sample trials.

    The model id equals the speaker id.  Targets are (model, own test
    segment) pairs, nontargets (model, other speaker's test segment) pairs,
    both sampled without replacement.  ``same_language`` restricts
    nontargets to speakers sharing a language label.
    """
    sessions: dict[str, list[str]] = {}
    language: dict[str, str] = {}
    for ident, spk, lang in zip(data.ids, data.speakers, data.languages):
        if spk == "-":
            raise FormatError(f"record {ident!r} has no speaker label")
        sessions.setdefault(spk, []).append(ident)
        language.setdefault(spk, lang)
    registry, tests = {}, []
    for spk, segs in sessions.items():
        if len(segs) < enroll_sessions:
            raise FormatError(f"speaker {spk!r} has {len(segs)} sessions, needs {enroll_sessions}")
        registry[spk] = segs[:enroll_sessions]
        tests.extend((seg, spk) for seg in segs[enroll_sessions:])
    models = list(registry)
    model_index = {m: i for i, m in enumerate(models)}
    test_spk = np.array([model_index[s] for _, s in tests], dtype=np.int64)
    if n_target > len(tests):
        raise FormatError(f"requested {n_target} target trials, only {len(tests)} available")
    allowed = test_spk[None, :] != np.arange(len(models))[:, None]  # (models, tests)
    if same_language:
        model_lang = np.array([language[m] for m in models])
        allowed &= model_lang[:, None] == model_lang[test_spk][None, :]
    cand_m, cand_t = np.nonzero(allowed)
    if n_nontarget > cand_m.size:
        raise FormatError(f"requested {n_nontarget} nontarget trials, only {cand_m.size} available")
    rng = np.random.default_rng(seed)
    target_idx = rng.choice(len(tests), size=n_target, replace=False)
    pick = rng.choice(cand_m.size, size=n_nontarget, replace=False)
    trials = [(models[test_spk[t]], tests[t][0]) for t in target_idx]
    trials += [(models[cand_m[p]], tests[cand_t[p]][0]) for p in pick]
    key = [True] * n_target + [False] * n_nontarget
    order = sorted(range(len(trials)), key=lambda i: trials[i])
    return registry, TrialList(tuple(trials[i] for i in order), tuple(key[i] for i in order))


def random_shifts(names: Sequence[str], dim: int, magnitude: float, rng: np.random.Generator,
                  zero_first: bool = False) -> list[tuple[str, np.ndarray]]:
    """Random-direction shift vectors of a given Euclidean norm, one per name."""
    out = []
    for i, name in enumerate(names):
        v = rng.standard_normal(dim)
        v *= magnitude / np.linalg.norm(v)
        out.append((name, np.zeros(dim) if zero_first and i == 0 else v))
    return out
