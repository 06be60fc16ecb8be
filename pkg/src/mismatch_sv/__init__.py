"""Embedding-space speaker-verification backend for language-mismatched conditions."""

from .core import (UNKNOWN, EmbeddingRecord, EmbeddingSet, FormatError, Gender, MismatchSVError,
                   NumericalError, ScoreSet, TrialList, build_enrollment_models, load_embeddings,
                   load_key, load_registry, load_scores, load_trials, save_embeddings, save_key,
                   save_labels, save_registry, save_scores, save_trials)

__version__ = "0.1.0"
