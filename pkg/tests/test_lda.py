import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ascfusion.errors import ConfigError, DataError
from ascfusion.lda import LdaModel, fit_lda, generalized_residual, scatter_matrices, transform


def gaussian_classes(rng, k, p, n_per, spread=4.0):
    means = rng.normal(scale=spread, size=(k, p))
    X = np.concatenate([m + rng.normal(size=(n_per, p)) for m in means])
    return X, np.repeat(np.arange(k), n_per)


def test_two_class_fisher_direction(rng):
    X = np.concatenate([rng.normal(size=(500, 2)), rng.normal(size=(500, 2)) + [10, 0]])
    y = np.repeat([0, 1], 500)
    model = fit_lda(X, y, 1)
    Sw, _, _ = scatter_matrices(X, y)
    ref = np.linalg.solve(Sw, X[y == 0].mean(0) - X[y == 1].mean(0))
    cos = abs(model.projection[0] @ ref) / np.linalg.norm(ref)
    assert cos >= 0.999
    assert abs(model.projection[0] @ [1, 0]) >= 0.999


def test_fifteen_class_residual_and_rank(rng):
    X, y = gaussian_classes(rng, 15, 40, 30)
    model = fit_lda(X, y, 14)
    assert model.effective_rank <= 14
    assert np.all(generalized_residual(model, X, y) < 1e-6)
    assert np.all(np.diff(model.eigenvalues) <= 0)


def test_extended_dimension_warns_and_keeps_residual(rng):
    X, y = gaussian_classes(rng, 15, 40, 30)
    with pytest.warns(UserWarning, match="exceeds between-class rank"):
        model = fit_lda(X, y, 30)
    assert model.dim == 30 and model.effective_rank == 14
    assert model.warnings
    assert np.all(generalized_residual(model, X, y) < 1e-6)
    # the Fisher directions dominate the near-null ones
    assert model.eigenvalues[13] > 1e3 * abs(model.eigenvalues[14:]).max()


def test_strict_caps_dimension(rng):
    X, y = gaussian_classes(rng, 4, 10, 20)
    with pytest.warns(UserWarning, match="capped"):
        model = fit_lda(X, y, 8, strict=True)
    assert model.dim == 3


def test_duplicated_samples_same_projection(rng):
    X, y = gaussian_classes(rng, 5, 8, 20)
    a = fit_lda(X, y, 4)
    b = fit_lda(np.concatenate([X, X]), np.concatenate([y, y]), 4)
    np.testing.assert_allclose(a.projection, b.projection, atol=1e-8)


def test_sample_order_invariance(rng):
    X, y = gaussian_classes(rng, 5, 8, 20)
    perm = rng.permutation(len(y))
    a, b = fit_lda(X, y, 4), fit_lda(X[perm], y[perm], 4)
    np.testing.assert_allclose(a.projection, b.projection, atol=1e-8)


def test_transform_shapes_and_centering(rng):
    X, y = gaussian_classes(rng, 15, 820, 8, spread=1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = fit_lda(X, y, 64)
    Z = transform(model, X)
    assert Z.shape == (len(X), 64)
    np.testing.assert_allclose(transform(model, X.mean(axis=0, keepdims=True)), 0, atol=1e-9)


@settings(max_examples=20)
@given(st.floats(0, 1), st.integers(0, 1000))
def test_transform_is_affine(alpha, seed):
    rng = np.random.default_rng(seed)
    X, y = gaussian_classes(rng, 3, 5, 10)
    model = fit_lda(X, y, 2)
    a, b = rng.normal(size=5), rng.normal(size=5)
    np.testing.assert_allclose(model.transform(alpha * a + (1 - alpha) * b),
                               alpha * model.transform(a) + (1 - alpha) * model.transform(b), atol=1e-9)


def test_errors(rng):
    X = rng.normal(size=(10, 3))
    with pytest.raises(DataError, match="two classes"):
        fit_lda(X, np.zeros(10), 1)
    with pytest.raises(DataError, match="fewer than two"):
        fit_lda(X, np.r_[np.zeros(9), 1], 1)
    with pytest.raises(ConfigError):
        fit_lda(X, np.arange(10) % 2, 4)
    model = fit_lda(X, np.arange(10) % 2, 1)
    with pytest.raises(DataError):
        model.transform(np.zeros((2, 4)))


def test_save_load(tmp_path, rng):
    X, y = gaussian_classes(rng, 3, 5, 10)
    model = fit_lda(X, y, 2)
    model.save(tmp_path / "lda.npz")
    back = LdaModel.load(tmp_path / "lda.npz")
    np.testing.assert_array_equal(back.transform(X), model.transform(X))
    assert back.effective_rank == model.effective_rank
