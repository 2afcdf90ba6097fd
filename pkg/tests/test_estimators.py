import numpy as np
import pytest
from sklearn.base import clone

from slab.estimators import GaussianKDE, NadarayaWatsonRegressor, silverman_bandwidth
from slab.exceptions import EstimationError


@pytest.fixture(scope="module")
def normal_sample():
    return np.random.default_rng(0).standard_normal((100_000, 2))


def test_silverman_bandwidth_formula():
    X = np.random.default_rng(1).normal(size=(500, 2)) * [1.0, 3.0]
    h = silverman_bandwidth(X)
    assert h == pytest.approx(X.std(axis=0).mean() * (4 / (4 * 500)) ** (1 / 6))
    with pytest.raises(EstimationError):
        silverman_bandwidth(np.ones((10, 2)))


@pytest.mark.parametrize("method", ["binned", "exact"])
def test_kde_matches_smoothed_gaussian(normal_sample, method):
    X = normal_sample
    kde = GaussianKDE(bandwidth=0.2, method=method).fit(X)
    q = np.array([[0.0, 0.0], [0.5, -0.5], [1.0, 0.3]])
    s2 = 1 + 0.2**2
    truth = np.exp(-np.sum(q**2, -1) / (2 * s2)) / (2 * np.pi * s2)
    np.testing.assert_allclose(kde.density(q), truth, rtol=0.05)
    np.testing.assert_allclose(kde.grad_log(q), -q / s2, atol=0.08)


def test_binned_and_exact_agree(normal_sample):
    X = normal_sample[:20_000]
    q = np.random.default_rng(3).normal(size=(30, 2)) * 0.8
    a = GaussianKDE(bandwidth=0.3, method="binned").fit(X)
    b = GaussianKDE(bandwidth=0.3, method="exact").fit(X)
    np.testing.assert_allclose(a.density(q), b.density(q), rtol=0.01, atol=1e-4)
    np.testing.assert_allclose(a.gradient(q), b.gradient(q), atol=2e-3)


def test_kde_degenerate_sample():
    with pytest.raises(EstimationError):
        GaussianKDE().fit(np.zeros((100, 2)))


def test_kde_sklearn_protocol(normal_sample):
    kde = GaussianKDE(bandwidth=0.25)
    assert clone(kde).get_params() == kde.get_params()
    kde.fit(normal_sample[:5000])
    assert np.isfinite(kde.score(normal_sample[:100]))
    assert kde.score_samples(normal_sample[:3]).shape == (3,)


def test_nadaraya_watson_linear_target():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(50_000, 1))
    y = -X[:, 0] + 0.5 * rng.normal(size=50_000)
    nw = NadarayaWatsonRegressor(bandwidth=0.1).fit(X, y)
    grid = np.linspace(-1, 1, 5)[:, None]
    mean, se = nw.predict(grid, return_std=True)
    # smoothing bias of a linear target under a N(0,1) design is -bw^2 * x * (dlog rho / dx)
    bias = 0.1**2 * grid[:, 0]
    assert np.all(np.abs(mean - (-grid[:, 0] + bias)) <= 3 * se + 1e-3)


def test_nadaraya_watson_sparse_points_are_nan():
    X = np.random.default_rng(5).normal(size=(10_000, 2))
    y = X.copy()
    nw = NadarayaWatsonRegressor(bandwidth=0.1, min_samples=20).fit(X, y)
    mean, se, n_eff = nw.predict_full(np.array([[0.0, 0.0], [8.0, 8.0]]))
    assert np.all(np.isfinite(mean[0])) and np.all(np.isnan(mean[1]))
    assert n_eff[1] < 20 <= n_eff[0]


def test_nadaraya_watson_rejects_bad_input():
    with pytest.raises(ValueError):
        NadarayaWatsonRegressor(bandwidth=0.0).fit(np.zeros((3, 1)), np.zeros(3))
    with pytest.raises(ValueError):
        NadarayaWatsonRegressor().fit(np.zeros((3, 1)), np.zeros(4))
