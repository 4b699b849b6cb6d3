"""Linear datamodel over random keep/ablate masks, fitted by ridge regression.

Each mask sample keeps every scoped component with probability ``keep_prob``
and records the objective of the masked model. Regressing those values on the
mask bits gives one coefficient per component, an expensive estimate of the
same quantity the first-order scores approximate in a single backward pass.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .attribution import AttributionMap, MCConfig, ObjectiveSpec, Scope, prepare_objective
from .autodiff import ComponentId
from .diffusion import DenoiserModel
from .errors import ConfigError, EmptyInputError, RankDeficiencyError, UndefinedCorrelationError

MAX_SCOPE = 2048


@dataclass(frozen=True)
class MaskSample:
    bits: np.ndarray  # uint8, 1 = kept
    value: float

    def bitstring(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)


@dataclass
class LinearDatamodel:
    alpha: np.ndarray
    intercept: float
    lam: float
    r2: float
    n_samples: int

    def predict(self, bits) -> np.ndarray:
        return np.asarray(bits, dtype=np.float64) @ self.alpha + self.intercept

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "intercept": self.intercept,
            "lambda": self.lam,
            "r2": self.r2,
            "n_samples": self.n_samples,
        }


def block_scope(model: DenoiserModel, key=("h1", "weight"), rows=range(8)) -> list[ComponentId]:
    """Every weight in the given rows of one matrix, row-major."""
    shape = np.shape(model.params[tuple(key)])
    if len(shape) != 2:
        raise ConfigError(f"{key} is not a matrix")
    rows = list(rows)
    if any(not 0 <= r < shape[0] for r in rows):
        raise ConfigError(f"rows outside {key} with {shape[0]} rows")
    return [ComponentId(key[0], key[1], r, c) for r in rows for c in range(shape[1])]


def _flat_scope(model: DenoiserModel, scope) -> tuple[Scope, np.ndarray]:
    scope = list(scope)
    if not scope:
        raise ConfigError("empty datamodel scope")
    if len(scope) > MAX_SCOPE:
        raise ConfigError(f"datamodel scope has {len(scope)} components; the bound is {MAX_SCOPE}")
    if len(set(scope)) != len(scope):
        raise ConfigError("datamodel scope lists a component twice")
    keys = list(dict.fromkeys(cid.key for cid in scope))
    sc = Scope(model, keys)
    return sc, sc.to_flat(scope)


def sample_masks(model: DenoiserModel, objective: ObjectiveSpec, scope, n: int, keep_prob: float = 0.9,
                 mc: MCConfig | None = None, seed: int = 0) -> list[MaskSample]:
    """Measure the objective under ``n`` Bernoulli(keep_prob) masks over ``scope``.

    Every mask is scored against the same frozen Monte Carlo draws, and mask
    ``j`` comes from its own stream keyed by ``(seed, j)``.
    """
    if n < 1:
        raise EmptyInputError("need at least one mask sample")
    if not 0 < keep_prob <= 1:
        raise ConfigError("keep_prob must lie in (0, 1]")
    mc = mc or MCConfig()
    sc, flat = _flat_scope(model, scope)
    prepared = prepare_objective(model, objective, mc)
    out = []
    for j in range(n):
        bits = (np.random.default_rng([seed, 2, j]).random(len(flat)) < keep_prob).astype(np.uint8)
        params = sc.zero(model.params, flat[bits == 0])
        out.append(MaskSample(bits, prepared.value(params)))
    return out


def _design(samples) -> tuple[np.ndarray, np.ndarray]:
    samples = list(samples)
    if not samples:
        raise EmptyInputError("no mask samples")
    width = len(samples[0].bits)
    if any(len(s.bits) != width for s in samples):
        raise ConfigError("mask samples have different lengths")
    X = np.array([s.bits for s in samples], dtype=np.float64)
    y = np.array([s.value for s in samples], dtype=np.float64)
    return X, y


def ridge_fit(X: np.ndarray, y: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    """Minimize ||X a + b - y||^2 + lam ||a||^2 with an unpenalized intercept."""
    if lam < 0:
        raise ConfigError("ridge strength must be >= 0")
    x_mean = X.mean(axis=0)
    y_mean = float(y.mean())
    Xc = X - x_mean
    gram = Xc.T @ Xc
    rhs = Xc.T @ (y - y_mean)
    if lam == 0 and np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise RankDeficiencyError("normal equations are singular with lambda = 0; use lambda > 0")
    gram[np.diag_indices_from(gram)] += lam
    try:
        alpha = linalg.solve(gram, rhs, assume_a="pos")
    except linalg.LinAlgError as exc:
        raise RankDeficiencyError(f"normal equations are singular ({exc}); use lambda > 0") from exc
    return alpha, y_mean - float(x_mean @ alpha)


def fit_datamodel(samples, lam: float = 1e-3) -> LinearDatamodel:
    X, y = _design(samples)
    if len(y) < X.shape[1] / 4:
        raise ConfigError(f"{len(y)} samples is fewer than a quarter of the {X.shape[1]}-component scope")
    alpha, b = ridge_fit(X, y, lam)
    resid = y - (X @ alpha + b)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return LinearDatamodel(alpha, b, lam, r2, len(y))


class RidgeDatamodel(RegressorMixin, BaseEstimator):
    """Estimator form of :func:`ridge_fit` for plain (mask matrix, value) data."""

    def __init__(self, lam=1e-3):
        self.lam = lam

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.coef_, self.intercept_ = ridge_fit(X, y, self.lam)
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return check_array(X, dtype=np.float64) @ self.coef_ + self.intercept_


def _check_varied(name: str, v: np.ndarray) -> None:
    if np.all(v == v[0]):
        raise UndefinedCorrelationError(f"{name} is constant; correlation is undefined")


def compare_to_first_order(dm: LinearDatamodel, amap: AttributionMap, scope) -> dict:
    """Pearson and Spearman correlation of regression coefficients against scores."""
    scope = list(scope)
    if len(scope) != len(dm.alpha):
        raise ConfigError("scope size differs from the datamodel's coefficient count")
    scores = amap.scores[amap.scope.to_flat(scope)]
    alpha = np.asarray(dm.alpha, dtype=np.float64)
    if len(alpha) < 2:
        raise UndefinedCorrelationError("need at least two components")
    _check_varied("datamodel coefficients", alpha)
    _check_varied("first-order scores", scores)
    return {
        "pearson": float(stats.pearsonr(alpha, scores)[0]),
        "spearman": float(stats.spearmanr(alpha, scores)[0]),
    }


def write_masks_csv(samples, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mask", "J"])
        for s in samples:
            writer.writerow([s.bitstring(), repr(float(s.value))])


def read_masks_csv(path) -> list[MaskSample]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["mask", "J"]:
            raise ConfigError(f"{path}: expected header mask,J, got {header}")
        out = []
        for bits, value in reader:
            if set(bits) - {"0", "1"}:
                raise ConfigError(f"{path}: mask column must be a bit string")
            out.append(MaskSample(np.frombuffer(bits.encode(), dtype=np.uint8) - ord("0"), float(value)))
    return out
