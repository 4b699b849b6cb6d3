import numpy as np
import pytest

from cadlab.attribution import AttributionMap, MCConfig, ObjectiveSpec
from cadlab.editing import POSITIVE, EditPlan
from cadlab.errors import ConfigError, UndefinedCorrelationError
from cadlab.evaluation import (
    EditReport,
    correlation_study,
    edit_report,
    layer_breakdown,
    pearson,
    ratio_sweep,
)

MC = MCConfig(n_samples=32, seed=0, pool_size=8)


def test_pearson_examples():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert pearson([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)


def test_pearson_zero_variance():
    with pytest.raises(UndefinedCorrelationError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(UndefinedCorrelationError):
        pearson([1.0], [2.0])


def test_pearson_agrees_with_numpy():
    r = np.random.default_rng(0)
    x, y = r.standard_normal(50), r.standard_normal(50)
    assert pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)


def test_edit_report_rates_validated():
    with pytest.raises(ValueError):
        EditReport({0: 1.2}, {0: 0.5}, 0, {})


def test_edit_report_arithmetic_and_round_trip():
    rep = EditReport({0: 0.9, 1: 0.8, 2: 0.6}, {0: 0.1, 1: 0.7, 2: 0.6}, 3, {"h1.weight": 3})
    assert rep.change(0) == pytest.approx(-0.8)
    assert rep.others_drop(0) == pytest.approx(0.05)
    assert EditReport.from_dict(rep.to_dict()) == rep


def test_identity_edit_report(small_model, specs):
    rep = edit_report(small_model, small_model, specs, 20, seed=1)
    assert rep.before == rep.after and rep.mask_size == 0


def test_ratio_sweep_zero_is_noop_and_nested(small_model, specs):
    plan = EditPlan(POSITIVE, row_cap=0.25)
    out = ratio_sweep(small_model, 0, [0.0, 0.005, 0.01], plan, MC, seed=0, specs=specs, n_per_concept=20)
    assert out[0][2].before == out[0][2].after and len(out[0][1]) == 0
    ids = [set(m.ids()) for _, m, _ in out]
    assert ids[0] <= ids[1] <= ids[2]
    with pytest.raises(ConfigError):
        ratio_sweep(small_model, 0, [0.01, 0.0], plan, MC, 0, specs, 20)


def test_layer_shares_sum_to_one():
    keys = (("a", "weight"), ("b", "weight"))
    amap = AttributionMap(np.array([1.0, -2.0, 3.0, -4.0, 0.5, 0.0]), keys, {keys[0]: (1, 3), keys[1]: (1, 3)},
                          {}, {}, "fp", 0.0)
    out = layer_breakdown(amap, ratio=0.5)
    assert sum(v["positive_share"] for v in out.values()) == pytest.approx(1.0)
    assert sum(v["negative_share"] for v in out.values()) == pytest.approx(1.0)
    assert out["a.weight"]["positive_mass"] == 4.0 and out["b.weight"]["negative_mass"] == 4.0


def test_correlation_study_shape_and_determinism(small_model):
    a = correlation_study(small_model, ObjectiveSpec.erase(0), n_trials=20, fraction=0.005, mc=MC, seed=2)
    b = correlation_study(small_model, ObjectiveSpec.erase(0), n_trials=20, fraction=0.005, mc=MC, seed=2)
    assert a.predicted.shape == (20,) and a.k >= 1
    np.testing.assert_array_equal(a.actual, b.actual)
    assert -1 <= a.r <= 1
    with pytest.raises(ConfigError):
        correlation_study(small_model, ObjectiveSpec.erase(0), fraction=0.5, mc=MC)
