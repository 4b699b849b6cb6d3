import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cadlab.attribution import AttributionMap, MCConfig, ObjectiveSpec
from cadlab.autodiff import ComponentId
from cadlab.datamodel import (
    MAX_SCOPE,
    LinearDatamodel,
    MaskSample,
    RidgeDatamodel,
    block_scope,
    compare_to_first_order,
    fit_datamodel,
    read_masks_csv,
    ridge_fit,
    sample_masks,
    write_masks_csv,
)
from cadlab.errors import ConfigError, EmptyInputError, RankDeficiencyError, UndefinedCorrelationError


def planted(n=400, p=12, seed=0, keep=0.7):
    r = np.random.default_rng(seed)
    alpha = r.standard_normal(p)
    X = (r.random((n, p)) < keep).astype(np.uint8)
    y = X @ alpha + 0.37
    return [MaskSample(x, float(v)) for x, v in zip(X, y)], alpha


def test_recovers_planted_linear_coefficients():
    samples, alpha = planted()
    dm = fit_datamodel(samples, lam=1e-8)
    np.testing.assert_allclose(dm.alpha, alpha, atol=1e-6, rtol=0)
    assert dm.intercept == pytest.approx(0.37, abs=1e-6)
    assert dm.r2 == pytest.approx(1.0)


def test_normal_equation_residual():
    samples, _ = planted(n=300, p=20, seed=4)
    # Add structured noise so the fit is not exact.
    r = np.random.default_rng(1)
    samples = [MaskSample(s.bits, s.value + 0.1 * r.standard_normal()) for s in samples]
    lam = 1e-3
    dm = fit_datamodel(samples, lam)
    X = np.array([s.bits for s in samples], dtype=float)
    y = np.array([s.value for s in samples])
    resid = (X.T @ X + lam * np.eye(X.shape[1])) @ dm.alpha - X.T @ (y - dm.intercept)
    assert np.max(np.abs(resid)) < 1e-8


def test_permutation_invariance():
    samples, _ = planted(n=200, p=10, seed=2)
    a = fit_datamodel(samples, 1e-3)
    perm = np.random.default_rng(3).permutation(len(samples))
    b = fit_datamodel([samples[i] for i in perm], 1e-3)
    np.testing.assert_allclose(a.alpha, b.alpha, atol=1e-10, rtol=0)


def test_identical_masks_give_zero_coefficients():
    samples = [MaskSample(np.ones(5, dtype=np.uint8), 2.5) for _ in range(10)]
    dm = fit_datamodel(samples, 1e-3)
    assert np.all(dm.alpha == 0) and dm.intercept == 2.5


def test_singular_without_ridge():
    samples = [MaskSample(np.ones(5, dtype=np.uint8), float(i)) for i in range(10)]
    with pytest.raises(RankDeficiencyError, match="lambda > 0"):
        fit_datamodel(samples, 0.0)


def test_needs_quarter_scope_samples():
    samples, _ = planted(n=2, p=12)
    with pytest.raises(ConfigError):
        fit_datamodel(samples)
    with pytest.raises(EmptyInputError):
        fit_datamodel([])


def test_ridge_estimator_matches_function():
    samples, _ = planted()
    X = np.array([s.bits for s in samples], dtype=float)
    y = np.array([s.value for s in samples])
    est = RidgeDatamodel(lam=1e-2).fit(X, y)
    alpha, b = ridge_fit(X, y, 1e-2)
    np.testing.assert_array_equal(est.coef_, alpha)
    assert est.score(X, y) > 0.99


def _map(scores, keys=(("h1", "weight"),)):
    scores = np.asarray(scores, dtype=float)
    return AttributionMap(scores, keys, {keys[0]: (1, scores.size)}, {}, {}, "fp", 0.0)


def test_compare_identity_and_flip():
    scores = np.array([0.3, -1.0, 2.0, 0.1])
    scope = [ComponentId("h1", "weight", 0, j) for j in range(4)]
    same = compare_to_first_order(LinearDatamodel(scores.copy(), 0.0, 0.0, 1.0, 4), _map(scores), scope)
    flip = compare_to_first_order(LinearDatamodel(-scores, 0.0, 0.0, 1.0, 4), _map(scores), scope)
    assert same == {"pearson": pytest.approx(1.0), "spearman": pytest.approx(1.0)}
    assert flip == {"pearson": pytest.approx(-1.0), "spearman": pytest.approx(-1.0)}


def test_compare_constant_is_undefined():
    scope = [ComponentId("h1", "weight", 0, j) for j in range(3)]
    with pytest.raises(UndefinedCorrelationError):
        compare_to_first_order(LinearDatamodel(np.zeros(3), 0.0, 0.0, 1.0, 3), _map([1.0, 2.0, 3.0]), scope)


def test_masks_csv_round_trip(tmp_path):
    samples, _ = planted(n=7, p=9)
    write_masks_csv(samples, tmp_path / "m.csv")
    back = read_masks_csv(tmp_path / "m.csv")
    assert [s.bitstring() for s in back] == [s.bitstring() for s in samples]
    assert [s.value for s in back] == [s.value for s in samples]


def test_scope_bound(small_model):
    scope = block_scope(small_model, ("h1", "weight"), range(16))
    assert len(scope) == 256
    too_big = [ComponentId("h1", "weight", 0, 0)] * (MAX_SCOPE + 1)
    with pytest.raises(ConfigError, match=str(MAX_SCOPE)):
        sample_masks(small_model, ObjectiveSpec.erase(0), too_big, 5)


def test_sample_masks_mechanics(small_model):
    mc = MCConfig(n_samples=32, seed=0, pool_size=8)
    scope = block_scope(small_model, ("h1", "weight"), range(2))
    with pytest.raises(EmptyInputError):
        sample_masks(small_model, ObjectiveSpec.erase(0), scope, 0, mc=mc)
    full = sample_masks(small_model, ObjectiveSpec.erase(0), scope, 3, keep_prob=1.0, mc=mc)
    assert all(s.bits.all() for s in full) and len({s.value for s in full}) == 1
    a = sample_masks(small_model, ObjectiveSpec.erase(0), scope, 4, mc=mc, seed=5)
    b = sample_masks(small_model, ObjectiveSpec.erase(0), scope, 4, mc=mc, seed=5)
    assert [s.value for s in a] == [s.value for s in b]
    assert all(len(s.bits) == len(scope) for s in a)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), lam=st.floats(1e-6, 1.0))
def test_ridge_shrinks_with_lambda(seed, lam):
    samples, _ = planted(n=60, p=6, seed=seed)
    small = fit_datamodel(samples, lam)
    large = fit_datamodel(samples, lam * 100)
    assert np.linalg.norm(large.alpha) <= np.linalg.norm(small.alpha) + 1e-12
