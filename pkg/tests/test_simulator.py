import numpy as np
import pytest

from mismatch_sv.core import FormatError
from mismatch_sv.simulator import SimConfig, covariance, generate_corpus, generate_protocol, random_shifts


def test_zero_shift_iid_mean():
    cfg = SimConfig(dim=8, n_speakers=10000, sessions_per_speaker=1, B_spec=0.0, W_spec=1.0, seed=1)
    data = generate_corpus(cfg)
    n, d = len(data), data.dim
    assert np.linalg.norm(data.vectors.mean(axis=0)) <= 5.0 / np.sqrt(n / d)
    assert np.allclose(np.cov(data.vectors.T), np.eye(8), atol=0.06)


def test_determinism():
    cfg = SimConfig(dim=4, n_speakers=20, sessions_per_speaker=(1, 5), seed=99)
    a, b = generate_corpus(cfg), generate_corpus(cfg)
    assert a.ids == b.ids and a.speakers == b.speakers and a.languages == b.languages
    np.testing.assert_array_equal(a.vectors, b.vectors)


def test_within_covariance_converges():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(16, 16))
    W0 = A @ A.T / 16 + 0.3 * np.eye(16)
    data = generate_corpus(SimConfig(dim=16, n_speakers=2000, sessions_per_speaker=10, W_spec=W0, seed=3))
    X = data.vectors.reshape(2000, 10, 16)
    R = (X - X.mean(axis=1, keepdims=True)).reshape(-1, 16)
    W = R.T @ R / (2000 * 9)
    assert np.linalg.norm(W - W0) / np.linalg.norm(W0) <= 0.10


def test_language_means_follow_shifts():
    shift = np.zeros(4)
    shift[0] = 6.0
    cfg = SimConfig(dim=4, n_speakers=4000, sessions_per_speaker=2, B_spec=1.0, W_spec=1.0,
                    languages=(("a", None), ("b", tuple(shift))), seed=5)
    data = generate_corpus(cfg)
    langs = np.array(data.languages)
    diff = data.vectors[langs == "b"].mean(axis=0) - data.vectors[langs == "a"].mean(axis=0)
    np.testing.assert_allclose(diff, shift, atol=0.15)


def test_labels_and_probabilities():
    cfg = SimConfig(dim=2, n_speakers=2000, sessions_per_speaker=1,
                    languages=(("x", None), ("y", None)), language_probs=(0.9, 0.1),
                    datasets=(("d1", None),), seed=2)
    data = generate_corpus(cfg)
    assert 0.87 < np.mean(np.array(data.languages) == "x") < 0.93
    assert set(data.datasets) == {"d1"}
    assert {g.value for g in data.genders} == {"m", "f"}


class TestConfig:
    def test_bad_covariance(self):
        with pytest.raises(FormatError):
            SimConfig(dim=2, n_speakers=1, W_spec=[[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(FormatError):
            covariance([1.0, 2.0, 3.0], 2)

    def test_bad_probabilities(self):
        with pytest.raises(FormatError):
            SimConfig(dim=2, n_speakers=1, languages=(("a", None), ("b", None)), language_probs=(0.5, 0.6))

    def test_from_dict(self):
        cfg = SimConfig.from_dict({"dim": 2, "n_speakers": 3, "sessions_per_speaker": [1, 2],
                                   "languages": {"a": None, "b": [1.0, 0.0]}})
        assert cfg.session_range == (1, 2) and cfg.languages[1] == ("b", (1.0, 0.0))
        with pytest.raises(FormatError, match="bogus"):
            SimConfig.from_dict({"dim": 2, "n_speakers": 3, "bogus": 1})

    def test_covariance_forms(self):
        np.testing.assert_array_equal(covariance(2.0, 2), 2 * np.eye(2))
        np.testing.assert_array_equal(covariance([1.0, 3.0], 2), np.diag([1.0, 3.0]))


class TestProtocol:
    def small(self):
        return generate_corpus(SimConfig(dim=2, n_speakers=2, sessions_per_speaker=3, seed=0))

    def test_counting(self):
        registry, trials = generate_protocol(self.small(), 1, 4, 2, seed=0)
        assert len(registry) == 2
        assert sum(trials.key) == 4 and len(trials) == 6

    def test_too_many_targets(self):
        with pytest.raises(FormatError):
            generate_protocol(self.small(), 1, 5, 0, seed=0)

    def test_disjoint_and_consistent_key(self):
        data = generate_corpus(SimConfig(dim=3, n_speakers=30, sessions_per_speaker=(2, 5), seed=4))
        registry, trials = generate_protocol(data, 2, 40, 200, seed=3)
        enrolled = {s for segs in registry.values() for s in segs}
        speaker = dict(zip(data.ids, data.speakers))
        assert not enrolled & set(trials.segment_ids)
        for (m, s), k in zip(trials.trials, trials.key):
            assert k == (speaker[s] == m)
        assert len(set(trials.trials)) == len(trials)

    def test_same_language(self):
        cfg = SimConfig(dim=2, n_speakers=40, sessions_per_speaker=3,
                        languages=(("a", None), ("b", None)), seed=1)
        data = generate_corpus(cfg)
        registry, trials = generate_protocol(data, 1, 10, 100, seed=2, same_language=True)
        lang = dict(zip(data.ids, data.languages))
        for m, s in trials.trials:
            assert lang[registry[m][0]] == lang[s]

    def test_seeded(self):
        data = generate_corpus(SimConfig(dim=2, n_speakers=10, sessions_per_speaker=3, seed=0))
        assert generate_protocol(data, 1, 5, 20, seed=7) == generate_protocol(data, 1, 5, 20, seed=7)


def test_random_shifts():
    out = random_shifts(["a", "b"], 5, 3.0, np.random.default_rng(0), zero_first=True)
    assert not out[0][1].any()
    assert np.linalg.norm(out[1][1]) == pytest.approx(3.0)
