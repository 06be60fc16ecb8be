import numpy as np
import pytest

from mismatch_sv.core import EmbeddingSet, FormatError, NumericalError
from mismatch_sv.preprocess import (SubspaceModel, WhitenModel, apply_whiten, fit_nuisance_subspace,
                                    fit_whiten, group_means, length_normalize, pca_subspace,
                                    remove_subspace)


def make_set(X, **labels):
    return EmbeddingSet([f"u{i}" for i in range(len(X))], X, **labels)


def ml_cov(X):
    C = X - X.mean(axis=0)
    return C.T @ C / len(X)


class TestWhiten:
    def test_identity_case(self):
        # 4 points with exactly zero mean and identity (1/n) covariance
        X = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
        model = fit_whiten(make_set(X), ridge=0.0)
        np.testing.assert_allclose(model.mean, 0.0, atol=1e-15)
        # transform is orthogonal: T^T T = I
        np.testing.assert_allclose(model.transform.T @ model.transform, np.eye(2), atol=1e-12)

    def test_diagonal_closed_form(self):
        X = np.array([[2.0, 0.0], [-2.0, 0.0], [0.0, 3.0], [0.0, -3.0]]) * np.sqrt(2)
        data = make_set(X)
        np.testing.assert_allclose(ml_cov(X), np.diag([4.0, 9.0]))
        model = fit_whiten(data, ridge=0.0)
        Y = apply_whiten(data, model).vectors
        np.testing.assert_allclose(ml_cov(Y), np.eye(2), atol=1e-12)
        np.testing.assert_allclose(sorted(np.abs(model.transform).max(axis=1)), [1 / 3, 1 / 2])

    def test_random_spd_large_sample(self):
        rng = np.random.default_rng(11)
        A = rng.normal(size=(8, 8)) + 4.0 * np.eye(8)
        X = rng.normal(size=(10000, 8)) @ A.T + 3.0
        Y = apply_whiten(make_set(X), fit_whiten(make_set(X))).vectors
        assert np.linalg.norm(ml_cov(Y) - np.eye(8)) <= 1e-2
        np.testing.assert_allclose(Y.mean(axis=0), 0.0, atol=1e-10)

    def test_fit_invariant_without_ridge(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(300, 6)) @ rng.normal(size=(6, 6))
        m = fit_whiten(make_set(X), ridge=0.0)
        assert np.linalg.norm(m.transform @ ml_cov(X) @ m.transform.T - np.eye(6)) <= 1e-6

    def test_default_ridge_handles_singular(self):
        X = np.zeros((5, 3))
        X[:, 0] = np.arange(5.0)
        model = fit_whiten(make_set(X))
        assert np.all(np.isfinite(model.transform))

    def test_mean_maps_to_zero(self):
        rng = np.random.default_rng(1)
        data = make_set(rng.normal(size=(50, 4)))
        m = fit_whiten(data)
        out = apply_whiten(make_set(m.mean[None, :]), m)
        np.testing.assert_allclose(out.vectors, 0.0, atol=1e-12)

    def test_identity_model(self):
        data = make_set(np.array([[1.0, 2.0]]))
        out = apply_whiten(data, WhitenModel(np.zeros(2), np.eye(2)))
        np.testing.assert_array_equal(out.vectors, data.vectors)

    def test_errors(self):
        with pytest.raises(FormatError):
            fit_whiten(make_set(np.ones((1, 2))))
        with pytest.raises(FormatError, match="dimension"):
            apply_whiten(make_set(np.ones((1, 3))), WhitenModel(np.zeros(2), np.eye(2)))

    def test_save_load(self, tmp_path):
        rng = np.random.default_rng(2)
        m = fit_whiten(make_set(rng.normal(size=(20, 3))))
        m.save(tmp_path / "w.txt")
        assert (tmp_path / "w.txt").read_text().startswith("whiten d=3\n")
        back = WhitenModel.load(tmp_path / "w.txt")
        np.testing.assert_array_equal(back.transform, m.transform)
        np.testing.assert_array_equal(back.mean, m.mean)


class TestLengthNorm:
    def test_example(self):
        out = length_normalize(make_set(np.array([[3.0, 4.0]])))
        np.testing.assert_allclose(out.vectors, [[0.6, 0.8]])

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        once = length_normalize(make_set(rng.normal(size=(30, 5))))
        twice = length_normalize(once)
        np.testing.assert_allclose(twice.vectors, once.vectors, atol=1e-15)

    def test_zero_vector(self):
        with pytest.raises(NumericalError, match="u1"):
            length_normalize(make_set(np.array([[1.0, 0.0], [0.0, 0.0]])))


def grouped_corpus(seed=0, d=12, groups=(("sre04", "m"), ("sre04", "f"), ("swb", "m"), ("swb", "f"), ("sre06", "m"))):
    rng = np.random.default_rng(seed)
    rows, ds, gs = [], [], []
    for g_ds, g_gen in groups:
        shift = rng.normal(scale=3.0, size=d)
        n = int(rng.integers(5, 40))
        rows.append(shift + rng.normal(size=(n, d)))
        ds += [g_ds] * n
        gs += [g_gen] * n
    X = np.concatenate(rows)
    return make_set(X, datasets=ds, genders=gs)


class TestSubspace:
    def test_two_groups_symmetric(self):
        X = np.array([[1.0, 0.5], [1.0, -0.5], [-1.0, 0.5], [-1.0, -0.5]])
        data = make_set(X, languages=["a", "a", "b", "b"])
        model = fit_nuisance_subspace(data, ["language"])
        assert model.k == 1
        np.testing.assert_allclose(np.abs(model.basis[:, 0]), [1.0, 0.0], atol=1e-12)

    def test_single_group_error(self):
        data = make_set(np.eye(3), languages=["a", "a", "-"])
        with pytest.raises(FormatError, match="at least 2 groups"):
            fit_nuisance_subspace(data, ["language"])

    def test_k_bounds(self):
        data = grouped_corpus()
        with pytest.raises(FormatError):
            fit_nuisance_subspace(data, ["dataset", "gender"], k=5)
        assert fit_nuisance_subspace(data, ["dataset", "gender"], k=5, center="data").k == 5

    def test_default_rank_is_groups_minus_one(self):
        data = grouped_corpus()
        model = fit_nuisance_subspace(data, ["dataset", "gender"])
        assert model.k == 4 and model.grouping == "datasetxgender"
        np.testing.assert_allclose(model.basis.T @ model.basis, np.eye(4), atol=1e-10)

    def test_twenty_groups_in_high_dimension(self):
        # 10 sub-corpora x 2 genders: 19 directions with mean-of-means centring,
        # 20 (600 -> 580) when centring on the pooled data mean.
        rng = np.random.default_rng(4)
        d, ids, rows, ds, gs = 600, [], [], [], []
        for c in range(10):
            for g in "mf":
                shift = rng.normal(size=d)
                for _ in range(3):
                    rows.append(shift + 0.1 * rng.normal(size=d))
                    ds.append(f"ds{c}")
                    gs.append(g)
        data = make_set(np.array(rows), datasets=ds, genders=gs)
        assert fit_nuisance_subspace(data, ["dataset", "gender"]).k == 19
        wide = fit_nuisance_subspace(data, ["dataset", "gender"], k=20, center="data")
        assert remove_subspace(data, wide).dim == 600
        assert np.linalg.matrix_rank(np.eye(600) - wide.basis @ wide.basis.T) == 580

    def test_unknown_labels_skipped_but_transformed(self):
        data = grouped_corpus()
        extra = make_set(np.ones((1, data.dim)))
        both = EmbeddingSet.concat([data, EmbeddingSet(["x"], extra.vectors)])
        m1 = fit_nuisance_subspace(data, ["dataset", "gender"])
        m2 = fit_nuisance_subspace(both, ["dataset", "gender"])
        np.testing.assert_allclose(np.abs(m1.basis), np.abs(m2.basis), atol=1e-12)
        assert remove_subspace(both, m2).vector("x").shape == (data.dim,)

    def test_remove_examples(self):
        model = SubspaceModel(np.array([[1.0], [0.0]]), "t")
        out = remove_subspace(make_set(np.array([[2.0, 7.0]])), model)
        np.testing.assert_allclose(out.vectors, [[0.0, 7.0]])
        empty = SubspaceModel(np.zeros((2, 0)), "t")
        np.testing.assert_array_equal(remove_subspace(make_set(np.array([[2.0, 7.0]])), empty).vectors,
                                      [[2.0, 7.0]])

    def test_projector_properties_and_collapse(self):
        data = grouped_corpus(seed=9)
        model = fit_nuisance_subspace(data, ["dataset", "gender"])
        V = model.basis
        assert np.linalg.norm(V - V @ (V.T @ V)) <= 1e-10
        once = remove_subspace(data, model)
        twice = remove_subspace(once, model)
        assert np.max(np.abs(twice.vectors - once.vectors)) <= 1e-12
        means = np.stack(list(group_means(once, ["dataset", "gender"]).values()))
        assert np.max(np.abs(means - means.mean(axis=0))) <= 1e-8

    def test_save_load(self, tmp_path):
        model = fit_nuisance_subspace(grouped_corpus(), ["dataset", "gender"])
        model.save(tmp_path / "s.txt")
        head = (tmp_path / "s.txt").read_text().splitlines()[0]
        assert head == f"subspace d={model.dim} k={model.k} grouping=datasetxgender"
        back = SubspaceModel.load(tmp_path / "s.txt")
        np.testing.assert_array_equal(back.basis, model.basis)

    def test_pca_subspace_orthonormal(self):
        model = pca_subspace(grouped_corpus(), 3)
        np.testing.assert_allclose(model.basis.T @ model.basis, np.eye(3), atol=1e-12)
