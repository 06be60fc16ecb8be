"""Domain types and text file I/O for embeddings, trials, keys, scores and registries.

File formats (UTF-8, one record per line, ``\\n`` terminated):

* vector file    ``id f1 f2 ... fd``
* label file     ``id speaker gender language dataset`` with ``-`` for unknown
* trial file     ``model_id segment_id``
* key file       ``model_id segment_id target|nontarget``
* score file     ``model_id<TAB>segment_id<TAB>%.6f``
* registry file  ``model_id seg1 seg2 ...``
"""

from __future__ import annotations

import enum
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

UNKNOWN = "-"


class MismatchSVError(Exception):
    """Base class for all toolkit errors."""


class FormatError(MismatchSVError, ValueError):
    """Malformed input file or inconsistent in-memory structure."""


class NumericalError(MismatchSVError, ArithmeticError):
    """A numerical procedure could not produce a valid result."""


class Gender(str, enum.Enum):
    MALE = "m"
    FEMALE = "f"
    UNKNOWN = "-"

    @classmethod
    def parse(cls, token: str) -> "Gender":
        token = token.strip().lower()
        aliases = {"m": cls.MALE, "male": cls.MALE, "f": cls.FEMALE,
                   "female": cls.FEMALE, "-": cls.UNKNOWN, "unknown": cls.UNKNOWN}
        try:
            return aliases[token]
        except KeyError:
            raise FormatError(f"bad gender token {token!r}") from None


LABEL_KEYS = ("speaker", "gender", "language", "dataset")


@dataclass(frozen=True)
class EmbeddingRecord:
    id: str
    vector: np.ndarray
    speaker: str = UNKNOWN
    gender: Gender = Gender.UNKNOWN
    language: str = UNKNOWN
    dataset: str = UNKNOWN

    def label(self, key: str) -> str:
        value = getattr(self, key)
        return value.value if isinstance(value, Gender) else value


def _check_id(ident: str) -> None:
    if not ident or any(c.isspace() for c in ident):
        raise FormatError(f"invalid id {ident!r}: must be non-empty without whitespace")


class EmbeddingSet:
    """Ordered, immutable collection of labelled embeddings sharing one dimension.

    Vectors are held as a single ``(n, d)`` float64 matrix; labels as parallel
    tuples.  Transforms return new sets via :meth:`with_vectors`.
    """

    __slots__ = ("ids", "vectors", "speakers", "genders", "languages", "datasets", "_index")

    def __init__(
        self,
        ids: Sequence[str],
        vectors: np.ndarray,
        speakers: Sequence[str] | None = None,
        genders: Sequence[Gender] | None = None,
        languages: Sequence[str] | None = None,
        datasets: Sequence[str] | None = None,
        dim: int | None = None,
    ):
        vectors = np.array(vectors, dtype=np.float64)
        n = len(ids)
        if vectors.ndim == 1 and n == 0:
            vectors = vectors.reshape(0, dim or 0)
        if vectors.ndim != 2 or vectors.shape[0] != n:
            raise FormatError(f"vector matrix shape {vectors.shape} does not match {n} ids")
        if n == 0 and dim is not None:
            vectors = vectors.reshape(0, dim)
        if not np.all(np.isfinite(vectors)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(vectors), axis=1))[0])
            raise FormatError(f"non-finite vector component in record {ids[bad]!r}")
        ids = tuple(ids)
        for ident in ids:
            _check_id(ident)
        index = {ident: i for i, ident in enumerate(ids)}
        if len(index) != n:
            dup = next(k for k, c in Counter(ids).items() if c > 1)
            raise FormatError(f"duplicate id {dup!r}")

        def labels(values, default):
            if values is None:
                return (default,) * n
            values = tuple(values)
            if len(values) != n:
                raise FormatError("label list length does not match number of records")
            return values

        vectors.setflags(write=False)
        self.ids = ids
        self.vectors = vectors
        self.speakers = labels(speakers, UNKNOWN)
        self.genders = tuple(Gender(g) for g in labels(genders, Gender.UNKNOWN))
        self.languages = labels(languages, UNKNOWN)
        self.datasets = labels(datasets, UNKNOWN)
        self._index = index

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[EmbeddingRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def __contains__(self, ident: str) -> bool:
        return ident in self._index

    def __repr__(self) -> str:
        return f"EmbeddingSet(n={len(self)}, d={self.dim})"

    @classmethod
    def from_records(cls, records: Iterable[EmbeddingRecord], dim: int | None = None) -> "EmbeddingSet":
        records = list(records)
        if records:
            dims = {np.asarray(r.vector).shape for r in records}
            if len(dims) != 1:
                raise FormatError(f"records have differing dimensions {sorted(dims)}")
            vectors = np.stack([np.asarray(r.vector, dtype=np.float64) for r in records])
        else:
            vectors = np.zeros((0, dim or 0))
        return cls(
            [r.id for r in records], vectors,
            [r.speaker for r in records], [r.gender for r in records],
            [r.language for r in records], [r.dataset for r in records], dim=dim,
        )

    def record(self, i: int) -> EmbeddingRecord:
        return EmbeddingRecord(self.ids[i], self.vectors[i], self.speakers[i],
                               self.genders[i], self.languages[i], self.datasets[i])

    def index(self, ident: str) -> int:
        try:
            return self._index[ident]
        except KeyError:
            raise KeyError(f"unknown id {ident!r}") from None

    def vector(self, ident: str) -> np.ndarray:
        return self.vectors[self.index(ident)]

    def labels(self, key: str) -> tuple:
        if key not in LABEL_KEYS:
            raise ValueError(f"unknown label key {key!r}; expected one of {LABEL_KEYS}")
        values = getattr(self, key + "s")
        if key == "gender":
            return tuple(g.value for g in values)
        return values

    def with_vectors(self, vectors: np.ndarray) -> "EmbeddingSet":
        """Same ids and labels, new vectors (dimension may change)."""
        return EmbeddingSet(self.ids, vectors, self.speakers, self.genders,
                            self.languages, self.datasets, dim=np.shape(vectors)[-1])

    def with_labels(self, **labels: Sequence) -> "EmbeddingSet":
        current = {"speakers": self.speakers, "genders": self.genders,
                   "languages": self.languages, "datasets": self.datasets}
        for key, values in labels.items():
            if key not in current:
                raise ValueError(f"unknown label field {key!r}")
            current[key] = values
        return EmbeddingSet(self.ids, self.vectors, dim=self.dim, **current)

    def subset(self, ids_or_mask) -> "EmbeddingSet":
        if isinstance(ids_or_mask, np.ndarray) and ids_or_mask.dtype == bool:
            rows = np.flatnonzero(ids_or_mask)
        else:
            rows = np.array([self.index(i) for i in ids_or_mask], dtype=int)
        pick = lambda seq: [seq[r] for r in rows]  # noqa: E731
        return EmbeddingSet(pick(self.ids), self.vectors[rows], pick(self.speakers),
                            pick(self.genders), pick(self.languages), pick(self.datasets),
                            dim=self.dim)

    @staticmethod
    def concat(sets: Sequence["EmbeddingSet"]) -> "EmbeddingSet":
        if not sets:
            raise ValueError("nothing to concatenate")
        dims = {s.dim for s in sets}
        if len(dims) != 1:
            raise FormatError(f"cannot concatenate sets of dimensions {sorted(dims)}")
        return EmbeddingSet(
            [i for s in sets for i in s.ids],
            np.concatenate([s.vectors for s in sets]),
            [x for s in sets for x in s.speakers], [x for s in sets for x in s.genders],
            [x for s in sets for x in s.languages], [x for s in sets for x in s.datasets],
            dim=sets[0].dim,
        )


@dataclass(frozen=True)
class TrialList:
    trials: tuple[tuple[str, str], ...]
    key: tuple[bool, ...] | None = None  # True = target

    def __post_init__(self):
        object.__setattr__(self, "trials", tuple((str(m), str(s)) for m, s in self.trials))
        if self.key is not None:
            object.__setattr__(self, "key", tuple(bool(k) for k in self.key))
            if len(self.key) != len(self.trials):
                raise FormatError(f"key length {len(self.key)} != trial count {len(self.trials)}")

    def __len__(self) -> int:
        return len(self.trials)

    @property
    def model_ids(self) -> list[str]:
        return [m for m, _ in self.trials]

    @property
    def segment_ids(self) -> list[str]:
        return [s for _, s in self.trials]

    def key_array(self) -> np.ndarray:
        if self.key is None:
            raise FormatError("trial list has no key")
        return np.array(self.key, dtype=bool)

    def with_key(self, key: Mapping[tuple[str, str], bool] | Sequence[bool]) -> "TrialList":
        if isinstance(key, Mapping):
            try:
                key = [key[t] for t in self.trials]
            except KeyError as exc:
                raise FormatError(f"trial {exc.args[0]} missing from key") from None
        return TrialList(self.trials, tuple(key))


@dataclass(frozen=True)
class ScoreSet:
    trials: TrialList
    scores: np.ndarray = field(repr=False)

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64).reshape(-1)
        if scores.shape[0] != len(self.trials):
            raise FormatError(f"{scores.shape[0]} scores for {len(self.trials)} trials")
        if not np.all(np.isfinite(scores)):
            bad = int(np.flatnonzero(~np.isfinite(scores))[0])
            raise NumericalError(f"non-finite score for trial {self.trials.trials[bad]}")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return len(self.trials)

    def with_scores(self, scores: np.ndarray) -> "ScoreSet":
        return ScoreSet(self.trials, scores)

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (target_scores, nontarget_scores)."""
        key = self.trials.key_array()
        return self.scores[key], self.scores[~key]


ModelRegistry = dict  # model_id -> list of enrollment segment ids


# --------------------------------------------------------------------------- I/O

def _lines(path) -> Iterator[tuple[int, list[str]]]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            fields = line.split()
            if fields:
                yield lineno, fields


def _parse_float(token: str, path, lineno: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise FormatError(f"{path}:{lineno}: non-numeric field {token!r}") from None
    if not math.isfinite(value):
        raise FormatError(f"{path}:{lineno}: non-finite value {token!r}")
    return value


def load_labels(path) -> dict[str, tuple[str, Gender, str, str]]:
    labels = {}
    for lineno, fields in _lines(path):
        if len(fields) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 fields, got {len(fields)}")
        ident, speaker, gender, language, dataset = fields
        if ident in labels:
            raise FormatError(f"{path}:{lineno}: duplicate id {ident!r}")
        labels[ident] = (speaker, Gender.parse(gender), language, dataset)
    return labels


def load_embeddings(path, labels_path=None) -> EmbeddingSet:
    """Read a vector file (and optionally its label file) into an EmbeddingSet.

    Dimension is inferred from the first record.  Ids missing from the label
    file get unknown labels.
    """
    ids, rows, dim = [], [], None
    seen = set()
    for lineno, fields in _lines(path):
        ident, values = fields[0], fields[1:]
        if dim is None:
            dim = len(values)
            if dim == 0:
                raise FormatError(f"{path}:{lineno}: record {ident!r} has no components")
        elif len(values) != dim:
            raise FormatError(
                f"{path}:{lineno}: dimension mismatch, expected {dim} got {len(values)}")
        if ident in seen:
            raise FormatError(f"{path}:{lineno}: duplicate id {ident!r}")
        seen.add(ident)
        ids.append(ident)
        rows.append([_parse_float(v, path, lineno) for v in values])
    if not ids:
        raise FormatError(f"{path}: empty vector file")
    table = load_labels(labels_path) if labels_path else {}
    unknown = (UNKNOWN, Gender.UNKNOWN, UNKNOWN, UNKNOWN)
    lab = [table.get(i, unknown) for i in ids]
    return EmbeddingSet(ids, np.array(rows), [x[0] for x in lab], [x[1] for x in lab],
                        [x[2] for x in lab], [x[3] for x in lab])


def save_embeddings(data: EmbeddingSet, path, labels_path=None) -> None:
    """Write vectors at full (shortest round-trip) precision."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ident, vec in zip(data.ids, data.vectors):
            f.write(ident + " " + " ".join(repr(float(x)) for x in vec) + "\n")
    if labels_path is not None:
        save_labels(data, labels_path)


def save_labels(data: EmbeddingSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in data:
            f.write(f"{r.id} {r.speaker} {r.gender.value} {r.language} {r.dataset}\n")


def load_trials(path) -> TrialList:
    """Read a trial file or a key file (third column ``target|nontarget``)."""
    trials, key = [], []
    ncols = None
    for lineno, fields in _lines(path):
        if ncols is None:
            ncols = len(fields)
            if ncols not in (2, 3):
                raise FormatError(f"{path}:{lineno}: expected 2 or 3 fields")
        elif len(fields) != ncols:
            raise FormatError(f"{path}:{lineno}: inconsistent field count")
        trials.append((fields[0], fields[1]))
        if ncols == 3:
            if fields[2] not in ("target", "nontarget"):
                raise FormatError(f"{path}:{lineno}: bad key token {fields[2]!r}")
            key.append(fields[2] == "target")
    return TrialList(tuple(trials), tuple(key) if ncols == 3 else None)


def load_key(path) -> dict[tuple[str, str], bool]:
    tl = load_trials(path)
    if tl.key is None:
        raise FormatError(f"{path}: not a key file (missing target/nontarget column)")
    return dict(zip(tl.trials, tl.key))


def save_trials(trials: TrialList, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for m, s in trials.trials:
            f.write(f"{m} {s}\n")


def save_key(trials: TrialList, path) -> None:
    key = trials.key_array()
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for (m, s), k in zip(trials.trials, key):
            f.write(f"{m} {s} {'target' if k else 'nontarget'}\n")


def save_scores(scores: ScoreSet, path) -> None:
    try:
        f = open(path, "w", encoding="utf-8", newline="\n")
    except OSError as exc:
        raise MismatchSVError(f"cannot write score file {path}: {exc}") from exc
    with f:
        for (m, s), v in zip(scores.trials.trials, scores.scores):
            f.write(f"{m}\t{s}\t{v:.6f}\n")


def load_scores(path, key=None) -> ScoreSet:
    trials, values = [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
            trials.append((fields[0], fields[1]))
            values.append(_parse_float(fields[2], path, lineno))
    tl = TrialList(tuple(trials))
    if key is not None:
        tl = tl.with_key(key)
    return ScoreSet(tl, np.array(values))


def load_registry(path) -> ModelRegistry:
    registry = {}
    for lineno, fields in _lines(path):
        if len(fields) < 2:
            raise FormatError(f"{path}:{lineno}: model {fields[0]!r} lists no segments")
        if fields[0] in registry:
            raise FormatError(f"{path}:{lineno}: duplicate model id {fields[0]!r}")
        registry[fields[0]] = list(fields[1:])
    return registry


def save_registry(registry: Mapping[str, Sequence[str]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for model, segs in registry.items():
            f.write(model + " " + " ".join(segs) + "\n")


def write_matrix_lines(f, matrix: np.ndarray) -> None:
    for row in np.atleast_2d(matrix):
        f.write(" ".join(repr(float(x)) for x in row) + "\n")


def read_matrix_lines(lines: Sequence[str], rows: int, cols: int, source="") -> np.ndarray:
    if len(lines) < rows:
        raise FormatError(f"{source}: expected {rows} matrix rows, found {len(lines)}")
    out = np.empty((rows, cols))
    for r in range(rows):
        fields = lines[r].split()
        if len(fields) != cols:
            raise FormatError(f"{source}: matrix row {r} has {len(fields)} values, expected {cols}")
        out[r] = [_parse_float(x, source, r) for x in fields]
    return out


def parse_header(line: str, kind: str, source="") -> dict[str, str]:
    fields = line.split()
    if not fields or fields[0] != kind:
        raise FormatError(f"{source}: expected a {kind!r} header, got {line.strip()!r}")
    out = {}
    for token in fields[1:]:
        name, sep, value = token.partition("=")
        if not sep:
            raise FormatError(f"{source}: malformed header token {token!r}")
        out[name] = value
    return out


# ------------------------------------------------------------------- enrollment

def _majority(values: Sequence, unknown):
    counts = Counter(values).most_common()
    if len(counts) > 1 and counts[0][1] == counts[1][1]:
        return unknown
    return counts[0][0]


def build_enrollment_models(data: EmbeddingSet, registry: Mapping[str, Sequence[str]]) -> EmbeddingSet:
    """Pool each model's enrollment segments: mean, then length-normalize.

    Labels are taken by majority vote over the segments; ties become unknown.
    """
    ids, vectors, labels = [], [], []
    for model, segs in registry.items():
        if not segs:
            raise FormatError(f"model {model!r} has an empty segment list")
        missing = [s for s in segs if s not in data]
        if missing:
            raise FormatError(f"model {model!r}: missing segment {missing[0]!r}")
        rows = [data.index(s) for s in segs]
        mean = data.vectors[rows].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0.0:
            raise NumericalError(f"model {model!r}: pooled vector has zero norm")
        ids.append(model)
        vectors.append(mean / norm)
        labels.append(tuple(
            _majority([data.labels(k)[r] for r in rows], UNKNOWN) for k in LABEL_KEYS))
    return EmbeddingSet(ids, np.array(vectors).reshape(len(ids), data.dim),
                        [l[0] for l in labels], [Gender(l[1]) for l in labels],
                        [l[2] for l in labels], [l[3] for l in labels], dim=data.dim)


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
