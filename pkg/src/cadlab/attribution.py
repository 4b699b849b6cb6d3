"""Monte Carlo concept objectives and first-order component attribution.

The attribution score of a component is ``w_i * dJ/dw_i``: the first-order
estimate of how much the objective drops when that component is zeroed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import ComponentId, ParameterStore
from .diffusion import DATA_DIM, DENSE_LAYERS, DenoiserModel, forward, forward_noise, sample
from .errors import ConfigError

ERASE = "erase"
AMPLIFY = "amplify"
TRAIN_LOSS = "train_loss"

DEFAULT_SCOPE = tuple((name, "weight") for name in DENSE_LAYERS)


@dataclass
class ObjectiveSpec:
    kind: str
    target: int
    base: int | None = None
    reference: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in (ERASE, AMPLIFY, TRAIN_LOSS):
            raise ConfigError(f"unknown objective kind {self.kind!r}")
        if self.kind in (AMPLIFY, TRAIN_LOSS):
            ref = None if self.reference is None else np.asarray(self.reference, dtype=np.float64).reshape(-1, DATA_DIM)
            if ref is None or len(ref) == 0:
                raise ConfigError(f"{self.kind} objective needs a non-empty reference set")
            self.reference = ref

    @classmethod
    def erase(cls, target: int, base: int | None = None) -> "ObjectiveSpec":
        return cls(ERASE, target, base)

    @classmethod
    def amplify(cls, target: int, reference) -> "ObjectiveSpec":
        return cls(AMPLIFY, target, reference=reference)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "target": self.target}
        if self.kind == ERASE:
            d["base"] = self.base
        else:
            d["reference"] = self.reference.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveSpec":
        return cls(d["kind"], int(d["target"]), d.get("base"), d.get("reference"))


@dataclass(frozen=True)
class MCConfig:
    n_samples: int = 2048
    seed: int = 0
    pool_size: int = 512

    def __post_init__(self):
        if self.n_samples < 1 or self.pool_size < 1:
            raise ConfigError("n_samples and pool_size must be >= 1")

    def to_dict(self) -> dict:
        return {"n_samples": self.n_samples, "seed": self.seed, "pool_size": self.pool_size}


def _indexed_draws(seed: int, n: int, n_points: int, T: int):
    """Per-sample (point index, timestep, noise); sample i uses stream (seed, i)."""
    idx = np.empty(n, dtype=np.intp)
    t = np.empty(n, dtype=np.intp)
    eps = np.empty((n, DATA_DIM))
    for i in range(n):
        rng = np.random.default_rng([seed, 1, i])
        idx[i] = rng.integers(n_points)
        t[i] = rng.integers(1, T + 1)
        eps[i] = rng.standard_normal(DATA_DIM)
    return idx, t, eps


@dataclass
class PreparedObjective:
    """An objective with every random draw frozen.

    Evaluating it on different parameter sets uses common random numbers, so
    differences isolate the parameter change.
    """

    spec: ObjectiveSpec
    arch: object
    x_t: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    base: int
    anchor: np.ndarray | None = None

    def __call__(self, params: ParameterStore):
        pred = forward(params, self.arch, self.x_t, self.spec.target, self.t)
        if self.spec.kind == ERASE:
            # The stop-gradient branch is a constant target taken from the unedited model.
            return ad.mean(ad.row_sq_norm(ad.add(ad.stop_gradient(self.anchor), ad.neg(pred))))
        loss = ad.mean(ad.row_sq_norm(ad.add(self.eps, ad.neg(pred))))
        return ad.neg(loss) if self.spec.kind == AMPLIFY else loss

    def value(self, params: ParameterStore) -> float:
        return ad.evaluate(self, params)


def prepare_objective(model: DenoiserModel, objective: ObjectiveSpec, mc: MCConfig) -> PreparedObjective:
    model.check_condition(objective.target)
    base = model.arch.base_index if objective.base is None else objective.base
    model.check_condition(base)
    if objective.kind == ERASE:
        # Self-generated pool of the target concept; its stream is keyed apart from the draws below.
        points = sample(model, objective.target, None, seed=mc.seed + 7919, n=mc.pool_size)
    else:
        points = objective.reference
    idx, t, eps = _indexed_draws(mc.seed, mc.n_samples, len(points), model.schedule.T)
    x_t = forward_noise(points[idx], t, eps, model.schedule)
    anchor = model.predict_noise(x_t, base, t) if objective.kind == ERASE else None
    return PreparedObjective(objective, model.arch, x_t, t, eps, base, anchor)


def estimate_objective(model: DenoiserModel, objective: ObjectiveSpec, mc: MCConfig) -> float:
    return prepare_objective(model, objective, mc).value(model.params)


class Scope:
    """Ordered set of parameter arrays with a flat component index."""

    def __init__(self, model_or_params, keys=DEFAULT_SCOPE):
        params = getattr(model_or_params, "params", model_or_params)
        self.keys = tuple(tuple(k) for k in keys)
        if not self.keys:
            raise ConfigError("empty eligible scope")
        for key in self.keys:
            if key not in params:
                raise ConfigError(f"scope names unknown array {key}")
        self.shapes = {k: np.shape(params[k]) for k in self.keys}
        sizes = [int(np.prod(self.shapes[k])) for k in self.keys]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.intp)
        self.size = int(self.offsets[-1])

    def __len__(self) -> int:
        return self.size

    def flatten(self, store: ParameterStore) -> np.ndarray:
        return np.concatenate([np.asarray(store[k], dtype=np.float64).ravel() for k in self.keys])

    def split(self, flat: np.ndarray) -> dict:
        return {k: flat[self.offsets[i] : self.offsets[i + 1]].reshape(self.shapes[k]) for i, k in enumerate(self.keys)}

    def locate(self, flat_index) -> tuple[int, np.ndarray]:
        """(key position, local flat index) for each flat index."""
        flat_index = np.asarray(flat_index, dtype=np.intp)
        if np.any(flat_index < 0) or np.any(flat_index >= self.size):
            raise IndexError("flat component index outside scope")
        pos = np.searchsorted(self.offsets, flat_index, side="right") - 1
        return pos, flat_index - self.offsets[pos]

    def to_ids(self, flat_index) -> list[ComponentId]:
        pos, local = self.locate(np.atleast_1d(flat_index))
        out = []
        for p, j in zip(pos, local):
            layer, kind = self.keys[p]
            shape = self.shapes[self.keys[p]]
            if len(shape) == 1:
                out.append(ComponentId(layer, kind, int(j), 0))
            else:
                out.append(ComponentId(layer, kind, int(j // shape[1]), int(j % shape[1])))
        return out

    def to_flat(self, ids) -> np.ndarray:
        out = np.empty(len(ids), dtype=np.intp)
        for n, cid in enumerate(ids):
            if cid.key not in self.shapes:
                raise IndexError(f"{cid} is outside the attribution scope")
            shape = self.shapes[cid.key]
            p = self.keys.index(cid.key)
            if len(shape) == 1:
                ok = cid.col == 0 and 0 <= cid.row < shape[0]
                local = cid.row
            else:
                ok = 0 <= cid.row < shape[0] and 0 <= cid.col < shape[1]
                local = cid.row * shape[1] + cid.col
            if not ok:
                raise IndexError(f"{cid} outside shape {shape}")
            out[n] = self.offsets[p] + local
        return out

    def rows(self) -> np.ndarray:
        """Global row id per flat component; 1-D arrays form a single row each."""
        out = np.empty(self.size, dtype=np.intp)
        next_row = 0
        for i, k in enumerate(self.keys):
            shape = self.shapes[k]
            if len(shape) == 1:
                out[self.offsets[i] : self.offsets[i + 1]] = next_row
                next_row += 1
            else:
                out[self.offsets[i] : self.offsets[i + 1]] = next_row + np.repeat(np.arange(shape[0]), shape[1])
                next_row += shape[0]
        return out

    def row_lengths(self) -> np.ndarray:
        """Length of the row each flat component belongs to."""
        out = np.empty(self.size, dtype=np.intp)
        for i, k in enumerate(self.keys):
            shape = self.shapes[k]
            out[self.offsets[i] : self.offsets[i + 1]] = shape[-1] if len(shape) == 2 else shape[0]
        return out

    def cols(self) -> tuple[np.ndarray, np.ndarray]:
        """Global column id and column length per flat component (1-D arrays: one column per entry)."""
        ids = np.empty(self.size, dtype=np.intp)
        lengths = np.empty(self.size, dtype=np.intp)
        next_col = 0
        for i, k in enumerate(self.keys):
            shape = self.shapes[k]
            sl = slice(self.offsets[i], self.offsets[i + 1])
            if len(shape) == 1:
                ids[sl] = next_col + np.arange(shape[0])
                lengths[sl] = 1
                next_col += shape[0]
            else:
                ids[sl] = next_col + np.tile(np.arange(shape[1]), shape[0])
                lengths[sl] = shape[0]
                next_col += shape[1]
        return ids, lengths

    def layer_of(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.keys)), np.diff(self.offsets))

    def zero(self, params: ParameterStore, flat_index) -> ParameterStore:
        """Copy of ``params`` with the listed components set to zero."""
        return self.scale(params, flat_index, 0.0)

    def scale(self, params: ParameterStore, flat_index, factor) -> ParameterStore:
        flat_index = np.asarray(flat_index, dtype=np.intp)
        if flat_index.size == 0:
            return params
        pos, local = self.locate(flat_index)
        factor = np.broadcast_to(np.asarray(factor, dtype=np.float64), flat_index.shape)
        out = params
        for p in np.unique(pos):
            key = self.keys[p]
            arr = np.array(params[key], dtype=np.float64, copy=True)
            sel = pos == p
            arr.reshape(-1)[local[sel]] *= factor[sel]
            out = out.replace(key, arr)
        return out


@dataclass
class AttributionMap:
    scores: np.ndarray  # flat over scope
    scope_keys: tuple
    shapes: dict
    objective: dict
    mc: dict
    fingerprint: str
    value: float
    _scope: Scope | None = field(default=None, repr=False, compare=False)

    @property
    def scope(self) -> Scope:
        if self._scope is None:
            self._scope = Scope({k: np.empty(self.shapes[k]) for k in self.scope_keys}, self.scope_keys)
        return self._scope

    def by_layer(self) -> dict:
        return self.scope.split(self.scores)

    def score(self, cid: ComponentId) -> float:
        return float(self.scores[self.scope.to_flat([cid])[0]])

    def predict_delta(self, subset) -> float:
        return predict_delta(self, subset)


def attribute(model: DenoiserModel, objective: ObjectiveSpec, mc: MCConfig, scope=DEFAULT_SCOPE,
              prepared: PreparedObjective | None = None) -> AttributionMap:
    """Scores ``w_i * dJ/dw_i`` over the eligible scope from one forward/backward pass."""
    prepared = prepared or prepare_objective(model, objective, mc)
    value, grads = ad.grad_scalar(prepared, model.params)
    sc = Scope(model, scope)
    scores = sc.flatten(model.params) * sc.flatten(grads)
    return AttributionMap(
        scores=scores,
        scope_keys=sc.keys,
        shapes=sc.shapes,
        objective=objective.to_dict(),
        mc=mc.to_dict(),
        fingerprint=model.fingerprint(),
        value=value,
        _scope=sc,
    )


def _as_flat(amap: AttributionMap, subset) -> np.ndarray:
    subset = list(subset) if not isinstance(subset, np.ndarray) else subset
    if len(subset) == 0:
        return np.empty(0, dtype=np.intp)
    if isinstance(subset[0], ComponentId):
        return amap.scope.to_flat(subset)
    flat = np.asarray(subset, dtype=np.intp)
    amap.scope.locate(flat)
    return flat


def predict_delta(amap: AttributionMap, subset) -> float:
    """Predicted J(w) - J(w with ``subset`` zeroed): the sum of their scores."""
    flat = _as_flat(amap, subset)
    return float(amap.scores[flat].sum()) if flat.size else 0.0


def actual_delta(model: DenoiserModel, objective: ObjectiveSpec, subset, mc: MCConfig,
                 scope=DEFAULT_SCOPE, prepared: PreparedObjective | None = None) -> float:
    """Measured J(w) - J(w with ``subset`` zeroed) under common random numbers."""
    prepared = prepared or prepare_objective(model, objective, mc)
    sc = Scope(model, scope)
    subset = list(subset) if not isinstance(subset, np.ndarray) else subset
    if len(subset) and isinstance(subset[0], ComponentId):
        flat = sc.to_flat(subset)
    else:
        flat = np.asarray(subset, dtype=np.intp)
    if flat.size == 0:
        return 0.0
    return prepared.value(model.params) - prepared.value(sc.zero(model.params, flat))


class ComponentAttributor(BaseEstimator):
    """Estimator front-end: ``fit(model)`` computes ``scores_`` for one objective."""

    def __init__(self, kind=ERASE, target=0, base=None, reference=None, n_samples=2048, seed=0,
                 pool_size=512, scope=DEFAULT_SCOPE):
        self.kind = kind
        self.target = target
        self.base = base
        self.reference = reference
        self.n_samples = n_samples
        self.seed = seed
        self.pool_size = pool_size
        self.scope = scope

    def fit(self, model: DenoiserModel, y=None):
        spec = ObjectiveSpec(self.kind, self.target, self.base, self.reference)
        mc = MCConfig(self.n_samples, self.seed, self.pool_size)
        self.map_ = attribute(model, spec, mc, self.scope)
        self.scores_ = self.map_.scores
        return self

    def transform(self, subsets):
        """Predicted objective change for each subset of flat component indices."""
        return np.array([predict_delta(self.map_, s) for s in subsets])
