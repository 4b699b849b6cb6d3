"""Masks, top-k component selection, and the erase/amplify/scale edits."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attribution import (
    AttributionMap,
    MCConfig,
    ObjectiveSpec,
    attribute,
)
from .autodiff import ComponentId
from .diffusion import DenoiserModel
from .errors import ConfigError, EmptySelectionError, StaleMaskError

POSITIVE = "positive"
NEGATIVE = "negative"
ZERO = "zero"
SCALE = "scale"

# Named budget presets.
RATIO_OBJECTS = 0.001
RATIO_NUDITY = 0.00075
RATIO_AMPLIFY = 0.002

# Edits touch the hidden-to-hidden blocks; the input and output projections are
# shared by every concept, so ablating them spills over onto the others.
HIDDEN_SCOPE = (("h1", "weight"), ("h2", "weight"))


@dataclass(frozen=True)
class MaskEntry:
    cid: ComponentId
    mode: str = ZERO
    factor: float = 0.0

    def __post_init__(self):
        if self.mode not in (ZERO, SCALE):
            raise ConfigError(f"unknown mask mode {self.mode!r}")
        if self.mode == SCALE and not self.factor > 0:
            raise ConfigError("scale factor must be positive")


@dataclass
class AblationMask:
    entries: tuple
    fingerprint: str
    objective: dict | None = None

    def __post_init__(self):
        self.entries = tuple(self.entries)
        ids = [e.cid for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigError("mask lists a component more than once")

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[ComponentId]:
        return [e.cid for e in self.entries]

    def per_layer(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for e in self.entries:
            name = f"{e.cid.layer}.{e.cid.kind}"
            counts[name] = counts.get(name, 0) + 1
        return counts


@dataclass
class EditPlan:
    sign: str = POSITIVE
    ratio: float = RATIO_OBJECTS
    k: int | None = None
    row_cap: float = 0.02
    scope: tuple = HIDDEN_SCOPE
    budget_mode: str = "global"
    col_cap: float | None = None

    def __post_init__(self):
        if self.sign not in (POSITIVE, NEGATIVE):
            raise ConfigError(f"sign must be {POSITIVE!r} or {NEGATIVE!r}")
        # ratio 0 is accepted as the explicit no-op edit.
        if not 0 <= self.ratio <= 1:
            raise ConfigError("ratio must lie in [0, 1]")
        if not 0 < self.row_cap <= 1:
            raise ConfigError("row_cap must lie in (0, 1]")
        if self.col_cap is not None and not 0 < self.col_cap <= 1:
            raise ConfigError("col_cap must lie in (0, 1]")
        if self.k is not None and self.k < 0:
            raise ConfigError("k must be >= 0")
        if self.budget_mode not in ("global", "per_layer"):
            raise ConfigError("budget_mode must be 'global' or 'per_layer'")
        self.scope = tuple(tuple(k) for k in self.scope)

    def budget(self, n: int) -> int:
        if self.k is not None:
            return min(self.k, n)
        return int(math.floor(self.ratio * n + 1e-9))


def _greedy(order, budget, rows, row_caps, cols=None, col_caps=None) -> list[int]:
    taken: list[int] = []
    used_r: dict[int, int] = {}
    used_c: dict[int, int] = {}
    for i in order:
        if len(taken) >= budget:
            break
        r = rows[i]
        if used_r.get(r, 0) >= row_caps[i]:
            continue
        if cols is not None:
            c = cols[i]
            if used_c.get(c, 0) >= col_caps[i]:
                continue
            used_c[c] = used_c.get(c, 0) + 1
        used_r[r] = used_r.get(r, 0) + 1
        taken.append(int(i))
    return taken


def select_flat(amap: AttributionMap, plan: EditPlan) -> np.ndarray:
    """Flat indices (into the map's scope) chosen by the plan, in selection order."""
    if not plan.scope:
        raise ConfigError("empty eligible scope")
    missing = [k for k in plan.scope if k not in amap.scope_keys]
    if missing:
        raise ConfigError(f"attribution map does not cover {missing}")
    sc = amap.scope
    layer = sc.layer_of()
    in_plan = np.isin(layer, [sc.keys.index(k) for k in plan.scope])
    n_eligible = int(in_plan.sum())
    if n_eligible == 0:
        raise ConfigError("empty eligible scope")
    scores = amap.scores
    rows = sc.rows()
    row_caps = np.floor(plan.row_cap * sc.row_lengths() + 1e-9).astype(int)
    cols = col_caps = None
    if plan.col_cap is not None:
        cols, col_len = sc.cols()
        col_caps = np.floor(plan.col_cap * col_len + 1e-9).astype(int)
    limits = (rows, row_caps, cols, col_caps)
    flat = np.arange(sc.size)
    # Ties are broken by (layer order, row, col), which is flat order.
    if plan.sign == POSITIVE:
        keep = in_plan & (scores > 0)
        order = flat[keep][np.lexsort((flat[keep], -scores[keep]))]
    else:
        keep = in_plan & (scores < 0)
        order = flat[keep][np.lexsort((flat[keep], scores[keep]))]
    if plan.budget_mode == "global":
        return np.array(_greedy(order, plan.budget(n_eligible), *limits), dtype=np.intp)
    picked = []
    for key in plan.scope:
        p = sc.keys.index(key)
        sub = order[layer[order] == p]
        picked.extend(_greedy(sub, plan.budget(int(np.sum(layer == p))), *limits))
    return np.array(picked, dtype=np.intp)


def select_components(amap: AttributionMap, plan: EditPlan, mode: str = ZERO, factor: float = 0.0) -> AblationMask:
    flat = select_flat(amap, plan)
    entries = [MaskEntry(cid, mode, factor) for cid in amap.scope.to_ids(flat)] if flat.size else []
    return AblationMask(entries, amap.fingerprint, amap.objective)


def apply_mask(model: DenoiserModel, mask: AblationMask, check_fingerprint: bool = True) -> DenoiserModel:
    """New model with the mask's components zeroed or rescaled; ``model`` is untouched."""
    if check_fingerprint and mask.fingerprint != model.fingerprint():
        raise StaleMaskError("mask was computed for a different model")
    grouped: dict[tuple, list[MaskEntry]] = {}
    for e in mask.entries:
        grouped.setdefault(e.cid.key, []).append(e)
    params = model.params
    for key, entries in grouped.items():
        if key not in params:
            raise IndexError(f"mask names unknown array {key}")
        arr = np.array(params[key], dtype=np.float64, copy=True)
        for e in entries:
            idx = params._index(e.cid)
            arr[idx] = 0.0 if e.mode == ZERO else arr[idx] * e.factor
        params = params.replace(key, arr)
    return model.with_params(params)


def cad_erase(model: DenoiserModel, target: int, base: int | None, plan: EditPlan, mc: MCConfig,
              amap: AttributionMap | None = None):
    """Zero the top positive components of the erase objective.

    Returns ``(edited_model, mask, attribution_map)``.
    """
    if plan.sign != POSITIVE:
        raise ConfigError("erasure ablates positive components")
    amap = amap or attribute(model, ObjectiveSpec.erase(target, base), mc)
    mask = select_components(amap, plan)
    return apply_mask(model, mask), mask, amap


def cad_amplify(model: DenoiserModel, target: int, reference, plan: EditPlan, mc: MCConfig,
                amap: AttributionMap | None = None):
    """Zero the most negative components of the (negated) training loss on ``reference``."""
    if plan.sign != NEGATIVE:
        raise ConfigError("amplification ablates negative components")
    amap = amap or attribute(model, ObjectiveSpec.amplify(target, reference), mc)
    mask = select_components(amap, plan)
    if len(mask) == 0 and plan.budget(len(amap.scores)) > 0:
        raise EmptySelectionError("no negative components found for amplification")
    return apply_mask(model, mask), mask, amap


def scale_intervention(model: DenoiserModel, amap: AttributionMap, sign: str, ratio: float, factor: float,
                       row_cap: float = 0.02, scope=None):
    """Rescale (instead of zeroing) the selected components by ``factor``."""
    if not factor > 0:
        raise ConfigError("scale factor must be positive")
    plan = EditPlan(sign=sign, ratio=ratio, row_cap=row_cap, scope=scope or HIDDEN_SCOPE)
    mask = select_components(amap, plan, mode=SCALE, factor=factor)
    return apply_mask(model, mask), mask
