"""Synthetic concept datasets and the analytic oracle classifier."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array

from .errors import ConfigError, EmptyInputError

NONE = -1
SEPARATION = 6.0


@dataclass(frozen=True)
class ConceptSpec:
    concept: int
    modes: tuple  # ((mean_x, mean_y), std) pairs

    def __post_init__(self):
        if not self.modes:
            raise ConfigError(f"concept {self.concept} has no modes")
        for mean, std in self.modes:
            if std <= 0 or len(mean) != 2:
                raise ConfigError(f"concept {self.concept}: invalid mode {mean!r}, std={std}")

    def to_dict(self) -> dict:
        return {"concept": self.concept, "modes": [[list(map(float, m)), float(s)] for m, s in self.modes]}

    @classmethod
    def from_dict(cls, d: dict) -> "ConceptSpec":
        return cls(int(d["concept"]), tuple((tuple(m), float(s)) for m, s in d["modes"]))


def default_specs(radius: float = 4.0, std: float = 0.5) -> list[ConceptSpec]:
    """Four single-mode concepts at (+-radius, +-radius)."""
    corners = [(-radius, radius), (radius, radius), (-radius, -radius), (radius, -radius)]
    return [ConceptSpec(i, ((corner, std),)) for i, corner in enumerate(corners)]


def validate_specs(specs) -> None:
    ids = [s.concept for s in specs]
    if sorted(ids) != list(range(len(specs))):
        raise ConfigError(f"concept ids must be 0..{len(specs) - 1}, got {ids}")
    max_std = max(std for s in specs for _, std in s.modes)
    for i, a in enumerate(specs):
        for b in specs[i + 1 :]:
            for ma, _ in a.modes:
                for mb, _ in b.modes:
                    gap = float(np.hypot(ma[0] - mb[0], ma[1] - mb[1]))
                    if gap < SEPARATION * max_std:
                        raise ConfigError(
                            f"concepts {a.concept} and {b.concept} overlap: mode gap {gap:.3g} "
                            f"< {SEPARATION:g} * {max_std:g}"
                        )


@dataclass
class SyntheticDataset:
    X: np.ndarray
    y: np.ndarray
    seed: int

    def __len__(self) -> int:
        return len(self.y)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["x", "y", "concept_id"])
            for (a, b), c in zip(self.X, self.y):
                writer.writerow([repr(float(a)), repr(float(b)), int(c)])

    @classmethod
    def from_csv(cls, path, seed: int = -1) -> "SyntheticDataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["x", "y", "concept_id"]:
                raise ConfigError(f"{path}: expected header x,y,concept_id, got {header}")
            rows = [(float(a), float(b), int(c)) for a, b, c in reader]
        X = np.array([r[:2] for r in rows], dtype=np.float64).reshape(-1, 2)
        y = np.array([r[2] for r in rows], dtype=np.intp)
        return cls(X, y, seed)


def draw_concept(spec: ConceptSpec, n: int, rng) -> np.ndarray:
    """``n`` clean draws from a concept's modes."""
    means = np.array([m for m, _ in spec.modes], dtype=np.float64)
    stds = np.array([s for _, s in spec.modes], dtype=np.float64)
    which = rng.integers(0, len(spec.modes), size=n)
    return means[which] + stds[which, None] * rng.standard_normal((n, 2))


def gen_dataset(specs, n_per_concept, seed: int, contamination=None) -> SyntheticDataset:
    """Gaussian draws around each concept's modes.

    ``n_per_concept`` is an int or a per-concept sequence. ``contamination``
    maps a concept id to the fraction of its labelled points that are really
    drawn from the other concepts (uniformly), modelling a concept whose
    training labels are unreliable.
    """
    validate_specs(specs)
    counts = np.broadcast_to(np.asarray(n_per_concept, dtype=int), (len(specs),))
    if np.any(counts < 1):
        raise ConfigError("n_per_concept must be >= 1")
    contamination = contamination or {}
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for spec, n in zip(specs, counts):
        q = float(contamination.get(spec.concept, 0.0))
        if not 0.0 <= q < 1.0:
            raise ConfigError(f"contamination for concept {spec.concept} must lie in [0, 1)")
        points = draw_concept(spec, n, rng)
        if q > 0 and len(specs) > 1:
            others = [s for s in specs if s.concept != spec.concept]
            swap = np.flatnonzero(rng.random(n) < q)
            donor = rng.integers(0, len(others), size=len(swap))
            for j, d in zip(swap, donor):
                points[j] = draw_concept(others[d], 1, rng)[0]
        xs.append(points)
        ys.append(np.full(n, spec.concept, dtype=np.intp))
    return SyntheticDataset(np.concatenate(xs), np.concatenate(ys), seed)


@dataclass(frozen=True)
class OracleVerdict:
    label: int
    distance: float


def _mode_table(specs):
    means, stds, owners = [], [], []
    for spec in sorted(specs, key=lambda s: s.concept):
        for mean, std in spec.modes:
            means.append(mean)
            stds.append(std)
            owners.append(spec.concept)
    return np.array(means, dtype=np.float64), np.array(stds, dtype=np.float64), np.array(owners)


def classify_batch(points, specs, reject_sigma: float = 4.0) -> tuple[np.ndarray, np.ndarray]:
    """Labels and normalized distances for an (n, 2) batch; NONE past ``reject_sigma``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    means, stds, owners = _mode_table(specs)
    dist = np.linalg.norm(points[:, None, :] - means[None, :, :], axis=2) / stds[None, :]
    # argmin returns the first minimum; modes are ordered by concept id, so ties go low.
    best = np.argmin(dist, axis=1)
    d = dist[np.arange(len(points)), best]
    labels = np.where(d > reject_sigma, NONE, owners[best])
    return labels, d


def classify(point, specs, reject_sigma: float = 4.0) -> OracleVerdict:
    labels, d = classify_batch(np.asarray(point)[None, :], specs, reject_sigma)
    return OracleVerdict(int(labels[0]), float(d[0]))


def concept_rate(samples, specs, target: int, reject_sigma: float = 4.0) -> float:
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if len(samples) == 0:
        raise EmptyInputError("concept_rate needs at least one sample")
    labels, _ = classify_batch(samples, specs, reject_sigma)
    return float(np.mean(labels == target))


class OracleClassifier(ClassifierMixin, BaseEstimator):
    """Nearest-mode classifier with a reject option; label -1 means NONE."""

    def __init__(self, specs=None, reject_sigma=4.0):
        self.specs = specs
        self.reject_sigma = reject_sigma

    def fit(self, X=None, y=None):
        self.specs_ = list(self.specs) if self.specs is not None else default_specs()
        validate_specs(self.specs_)
        self.classes_ = np.array([s.concept for s in self.specs_])
        return self

    def predict(self, X):
        X = check_array(X, dtype=np.float64)
        return classify_batch(X, self.specs_, self.reject_sigma)[0]

    def rates(self, X) -> dict[int, float]:
        """Share of each label (including NONE); sums to one."""
        labels = self.predict(X)
        keys = list(self.classes_) + [NONE]
        return {int(k): float(np.mean(labels == k)) for k in keys}


def specs_from_config(cfg: dict) -> list[ConceptSpec]:
    if "concepts" in cfg:
        return [ConceptSpec.from_dict({"concept": i, "modes": m}) for i, m in enumerate(cfg["concepts"])]
    return default_specs(cfg.get("radius", 4.0), cfg.get("std", 0.5))


def load_dataset(path: str | Path) -> SyntheticDataset:
    return SyntheticDataset.from_csv(path)
