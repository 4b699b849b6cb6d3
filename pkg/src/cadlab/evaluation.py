"""Experiment harness: Taylor-fidelity study, edit reports, ratio sweeps, layer breakdown."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .attribution import (
    DEFAULT_SCOPE,
    AttributionMap,
    MCConfig,
    ObjectiveSpec,
    attribute,
    prepare_objective,
)
from .data import classify_batch
from .diffusion import DenoiserModel, sample
from .editing import NEGATIVE, POSITIVE, AblationMask, EditPlan, apply_mask, select_components, select_flat
from .errors import ConfigError, UndefinedCorrelationError

REPORT_SAMPLES = 500


def pearson(xs, ys) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ConfigError("pearson needs two 1-D sequences of equal length")
    if len(xs) < 2:
        raise UndefinedCorrelationError("pearson needs at least two points")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sx = float(np.sqrt(dx @ dx))
    sy = float(np.sqrt(dy @ dy))
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("constant input; correlation is undefined")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


@dataclass
class CorrelationReport:
    predicted: np.ndarray
    actual: np.ndarray
    r: float
    n_trials: int
    fraction: float
    k: int
    seed: int
    mc: dict
    objective: dict
    base_value: float

    def to_dict(self) -> dict:
        return {
            "kind": "correlation",
            "r": self.r,
            "n_trials": self.n_trials,
            "fraction": self.fraction,
            "k": self.k,
            "seed": self.seed,
            "mc": self.mc,
            "objective": self.objective,
            "base_value": self.base_value,
            "predicted": self.predicted,
            "actual": self.actual,
        }

    def rows(self):
        return [(i, p, a) for i, (p, a) in enumerate(zip(self.predicted, self.actual))]


def correlation_study(model: DenoiserModel, objective: ObjectiveSpec, n_trials: int = 1000, fraction: float = 0.0005,
                      mc: MCConfig | None = None, seed: int = 0, scope=DEFAULT_SCOPE) -> CorrelationReport:
    """Predicted vs measured objective change for random ablations of ``fraction`` of the scope.

    Trial ``i`` draws its subset uniformly without replacement from the stream
    keyed by ``(seed, i)``. All evaluations share one frozen set of Monte Carlo
    draws.
    """
    if not 0 < fraction <= 0.01:
        raise ConfigError("fraction must lie in (0, 0.01]")
    if n_trials < 2:
        raise ConfigError("need at least two trials")
    mc = mc or MCConfig()
    prepared = prepare_objective(model, objective, mc)
    amap = attribute(model, objective, mc, scope, prepared=prepared)
    sc = amap.scope
    k = max(1, int(round(fraction * sc.size)))
    base_value = amap.value
    predicted = np.empty(n_trials)
    actual = np.empty(n_trials)
    for i in range(n_trials):
        subset = np.random.default_rng([seed, 3, i]).choice(sc.size, size=k, replace=False)
        predicted[i] = amap.scores[subset].sum()
        actual[i] = base_value - prepared.value(sc.zero(model.params, subset))
    if np.all(actual == actual[0]):
        raise UndefinedCorrelationError("every trial produced the same objective change")
    return CorrelationReport(predicted, actual, pearson(predicted, actual), n_trials, fraction, k, seed,
                             mc.to_dict(), objective.to_dict(), base_value)


def concept_rates(model: DenoiserModel, specs, n_per_concept: int = REPORT_SAMPLES, seed: int = 0) -> dict:
    """Share of samples the oracle assigns to the requested concept, per concept.

    Concept ``c`` is sampled from the sub-stream ``(seed, c)``.
    """
    out = {}
    for spec in specs:
        c = spec.concept
        labels, _ = classify_batch(sample(model, c, None, (seed, c), n_per_concept), specs)
        out[c] = float(np.mean(labels == c))
    return out


@dataclass
class EditReport:
    before: dict
    after: dict
    mask_size: int
    mask_layers: dict
    objective_before: float | None = None
    objective_after: float | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for rates in (self.before, self.after):
            if any(not 0.0 <= v <= 1.0 for v in rates.values()):
                raise ValueError("rates must lie in [0, 1]")

    def change(self, concept: int) -> float:
        return self.after[concept] - self.before[concept]

    def others_drop(self, target: int) -> float:
        """Mean fall in rate over every concept except ``target``."""
        others = [c for c in self.before if c != target]
        if not others:
            return 0.0
        return float(np.mean([self.before[c] - self.after[c] for c in others]))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["before"] = {str(k): v for k, v in self.before.items()}
        d["after"] = {str(k): v for k, v in self.after.items()}
        d["kind"] = "edit"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EditReport":
        return cls(
            before={int(k): v for k, v in d["before"].items()},
            after={int(k): v for k, v in d["after"].items()},
            mask_size=d["mask_size"],
            mask_layers=d["mask_layers"],
            objective_before=d.get("objective_before"),
            objective_after=d.get("objective_after"),
            config=d.get("config", {}),
        )


def edit_report(base: DenoiserModel, edited: DenoiserModel, specs, n_per_concept: int = REPORT_SAMPLES,
                seed: int = 0, mask: AblationMask | None = None, objective: ObjectiveSpec | None = None,
                mc: MCConfig | None = None, config: dict | None = None, before: dict | None = None) -> EditReport:
    """Per-concept rates of ``base`` and ``edited`` drawn with identical seeds.

    ``before`` may carry already measured base rates to skip resampling.
    """
    if base.arch != edited.arch:
        raise ConfigError("base and edited models have different architectures")
    before = dict(before) if before is not None else concept_rates(base, specs, n_per_concept, seed)
    after = concept_rates(edited, specs, n_per_concept, seed)
    j0 = j1 = None
    if objective is not None:
        prepared = prepare_objective(base, objective, mc or MCConfig())
        j0, j1 = prepared.value(base.params), prepared.value(edited.params)
    return EditReport(
        before=before,
        after=after,
        mask_size=len(mask) if mask is not None else 0,
        mask_layers=mask.per_layer() if mask is not None else {},
        objective_before=j0,
        objective_after=j1,
        config=dict(config or {}, n_per_concept=n_per_concept, seed=seed),
    )


def ratio_sweep(model: DenoiserModel, target: int, ratios, plan: EditPlan, mc: MCConfig, seed: int, specs,
                n_per_concept: int = REPORT_SAMPLES, base: int | None = None,
                amap: AttributionMap | None = None) -> list[tuple[float, AblationMask, EditReport]]:
    """One erase edit per ratio, all selected from a single attribution map."""
    ratios = [float(r) for r in ratios]
    if ratios != sorted(ratios):
        raise ConfigError("ratios must be sorted ascending")
    amap = amap or attribute(model, ObjectiveSpec.erase(target, base), mc)
    before = concept_rates(model, specs, n_per_concept, seed)
    out = []
    for ratio in ratios:
        step = dataclasses.replace(plan, ratio=ratio, k=None)
        mask = select_components(amap, step)
        edited = apply_mask(model, mask)
        report = edit_report(model, edited, specs, n_per_concept, seed, mask, before=before,
                             config={"ratio": ratio, "target": target})
        out.append((ratio, mask, report))
    return out


def layer_breakdown(amap: AttributionMap, ratio: float = 0.001) -> dict:
    """Per-layer share of score mass and of the top positive/negative picks.

    ``ratio`` sets how many components count as "top" on each side; picks
    ignore row caps. Each share column sums to one unless that side is empty.
    """
    if amap.scores.size == 0:
        raise ConfigError("empty attribution map")
    sc = amap.scope
    names = [f"{layer}.{kind}" for layer, kind in sc.keys]
    layer = sc.layer_of()
    scores = amap.scores
    k = max(1, int(ratio * sc.size))
    out = {}
    picks = {}
    for sign in (POSITIVE, NEGATIVE):
        plan = EditPlan(sign=sign, k=k, row_cap=1.0, scope=sc.keys)
        picks[sign] = select_flat(amap, plan)
    pos_mass = np.where(scores > 0, scores, 0.0)
    neg_mass = np.where(scores < 0, -scores, 0.0)
    totals = {"pos": pos_mass.sum(), "neg": neg_mass.sum()}
    for p, name in enumerate(names):
        in_layer = layer == p
        n_pos = int(np.sum(layer[picks[POSITIVE]] == p))
        n_neg = int(np.sum(layer[picks[NEGATIVE]] == p))
        out[name] = {
            "components": int(in_layer.sum()),
            "positive_mass": float(pos_mass[in_layer].sum()),
            "negative_mass": float(neg_mass[in_layer].sum()),
            "positive_share": float(pos_mass[in_layer].sum() / totals["pos"]) if totals["pos"] > 0 else 0.0,
            "negative_share": float(neg_mass[in_layer].sum() / totals["neg"]) if totals["neg"] > 0 else 0.0,
            "top_positive": n_pos,
            "top_negative": n_neg,
            "top_positive_share": n_pos / len(picks[POSITIVE]) if len(picks[POSITIVE]) else 0.0,
            "top_negative_share": n_neg / len(picks[NEGATIVE]) if len(picks[NEGATIVE]) else 0.0,
        }
    return out
