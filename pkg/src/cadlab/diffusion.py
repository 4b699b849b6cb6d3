"""Toy conditional denoising diffusion model over 2-D points."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted, check_X_y

from . import autodiff as ad
from .autodiff import ParameterStore, layer_scope
from .errors import ConfigError, NumericError, TrainingDivergedError

DATA_DIM = 2
# beta_max 0.2 drives alpha_bar_T to ~2e-5 so x_T really is N(0, I) at T = 100.
DEFAULT_BETAS = (1e-4, 0.2)
DENSE_LAYERS = ("in", "h1", "h2", "out")
AUX_LAYERS = ("time", "cond")
# A wide concept-embedding init keeps concept codes well separated from the start.
DEFAULT_EMB_SCALE = 6.0


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_min": float(self.betas[0]), "beta_max": float(self.betas[-1])}


def build_schedule(T: int = 100, beta_min: float = DEFAULT_BETAS[0], beta_max: float = DEFAULT_BETAS[1]) -> NoiseSchedule:
    """Linear beta schedule; ``alpha_bars[t-1]`` is the cumulative product up to step t."""
    if not (T >= 2 and 0 < beta_min <= beta_max < 1):
        raise ConfigError(f"invalid schedule T={T} beta_min={beta_min} beta_max={beta_max}")
    betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    return NoiseSchedule(betas=betas, alpha_bars=np.cumprod(1.0 - betas))


def forward_noise(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Noise clean points to step ``t`` (1-based; scalar or per-row array)."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise IndexError(f"timestep outside 1..{schedule.T}")
    ab = schedule.alpha_bars[t - 1]
    if ab.ndim:
        ab = ab[:, None]
    return np.sqrt(ab) * np.asarray(x0, dtype=np.float64) + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def sinusoidal_features(t, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@dataclass(frozen=True)
class Architecture:
    hidden: int = 128
    emb: int = 64
    n_concepts: int = 4
    T: int = 100

    @property
    def base_index(self) -> int:
        """Row of the concept table reserved for the unconditional condition."""
        return self.n_concepts

    def shapes(self) -> dict[tuple[str, str], tuple[int, ...]]:
        H, E = self.hidden, self.emb
        return {
            ("in", "weight"): (H, DATA_DIM),
            ("in", "bias"): (H,),
            ("h1", "weight"): (H, H),
            ("h1", "bias"): (H,),
            ("h2", "weight"): (H, H),
            ("h2", "bias"): (H,),
            ("out", "weight"): (DATA_DIM, H),
            ("out", "bias"): (DATA_DIM,),
            ("time", "weight"): (E, E),
            ("time", "bias"): (E,),
            ("cond", "weight"): (H, E),
            ("cond", "bias"): (H,),
            ("concept", "embedding"): (self.n_concepts + 1, E),
        }


def init_params(arch: Architecture, seed: int | None = 0, zero: bool = False, emb_scale: float = 1.0) -> ParameterStore:
    rng = np.random.default_rng(seed)
    arrays = {}
    for key, shape in arch.shapes().items():
        if zero or key[1] == "bias":
            arrays[key] = np.zeros(shape)
        elif key[1] == "embedding":
            arrays[key] = emb_scale * rng.standard_normal(shape)
        else:
            arrays[key] = rng.standard_normal(shape) * math.sqrt(1.0 / shape[1])
    if not zero:
        # Start near zero output so the first loss equals the noise variance.
        arrays[("out", "weight")] *= 0.1
    return ParameterStore(arrays)


def forward(params: ParameterStore, arch: Architecture, x, c, t) -> ad.Tensor:
    """Noise prediction on a batch; ``params`` may hold arrays or tensors."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, DATA_DIM)
    n = x.shape[0]
    c = np.broadcast_to(np.asarray(c, dtype=np.intp), (n,))
    t = np.broadcast_to(np.asarray(t), (n,))
    feats = sinusoidal_features(t, arch.emb)
    with layer_scope("time"):
        temb = ad.silu(ad.linear(feats, params["time", "weight"], params["time", "bias"]))
    with layer_scope("concept"):
        e = temb + ad.take_rows(params["concept", "embedding"], c)
    with layer_scope("cond"):
        cvec = ad.linear(e, params["cond", "weight"], params["cond", "bias"])
    h = x
    for name in ("in", "h1", "h2"):
        with layer_scope(name):
            h = ad.silu(ad.linear(h, params[name, "weight"], params[name, "bias"]) + cvec)
    with layer_scope("out"):
        return ad.linear(h, params["out", "weight"], params["out", "bias"])


class DenoiserModel:
    """Conditional noise predictor ``eps_hat = model(x_t, c, t)``."""

    def __init__(self, arch: Architecture, params: ParameterStore, schedule: NoiseSchedule | None = None):
        self.arch = arch
        self.params = params
        self.schedule = schedule if schedule is not None else build_schedule(arch.T, *DEFAULT_BETAS)
        if self.schedule.T != arch.T:
            raise ConfigError(f"schedule has {self.schedule.T} steps, architecture expects {arch.T}")
        missing = set(arch.shapes()) ^ set(params.keys())
        if missing:
            raise ConfigError(f"parameter layout mismatch: {sorted(missing)}")

    @classmethod
    def initialize(cls, arch: Architecture | None = None, seed: int = 0, zero: bool = False,
                   schedule: NoiseSchedule | None = None, emb_scale: float = DEFAULT_EMB_SCALE) -> "DenoiserModel":
        arch = arch or Architecture()
        return cls(arch, init_params(arch, seed, zero=zero, emb_scale=emb_scale), schedule)

    def with_params(self, params: ParameterStore) -> "DenoiserModel":
        return DenoiserModel(self.arch, params, self.schedule)

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.arch, self.params.copy(), self.schedule)

    def fingerprint(self) -> str:
        return self.params.fingerprint()

    def check_condition(self, c) -> None:
        c = np.asarray(c)
        if np.any(c < 0) or np.any(c > self.arch.base_index):
            raise IndexError(f"concept index outside 0..{self.arch.base_index}")

    def predict_noise(self, x_t, c, t) -> np.ndarray:
        self.check_condition(c)
        consts = ParameterStore({k: ad.Tensor(v) for k, v in self.params.items()})
        return forward(consts, self.arch, x_t, c, t).data


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 0.02
    momentum: float = 0.9
    cond_dropout: float = 0.1
    seed: int = 0
    clip_norm: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ConfigError("cond_dropout must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr > 0 required")


def noise_loss(arch: Architecture, x_t, c, t, eps):
    """Batch objective mean ||eps - model(x_t, c, t)||^2 as a closure over params."""

    def objective(params):
        pred = forward(params, arch, x_t, c, t)
        return ad.mean(ad.row_sq_norm(ad.add(eps, ad.neg(pred))))

    return objective


def train(model: DenoiserModel, X, y, schedule: NoiseSchedule, config: TrainConfig):
    """SGD with momentum on the noise-prediction loss, with condition dropout.

    Returns the trained model (a new object) and the per-epoch mean loss.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if len(X) == 0:
        raise ConfigError("empty training set")
    model.check_condition(y)
    rng = np.random.default_rng(config.seed)
    params = model.params.copy()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    base = model.arch.base_index
    losses: list[float] = []
    n = len(X)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            m = len(idx)
            t = rng.integers(1, schedule.T + 1, size=m)
            eps = rng.standard_normal((m, DATA_DIM))
            c = np.where(rng.random(m) < config.cond_dropout, base, y[idx])
            x_t = forward_noise(X[idx], t, eps, schedule)
            try:
                loss, grads = ad.grad_scalar(noise_loss(model.arch, x_t, c, t, eps), params)
            except NumericError as exc:
                raise TrainingDivergedError(f"training diverged: {exc}", layer=exc.layer) from exc
            gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            shrink = min(1.0, config.clip_norm / gnorm) if config.clip_norm and gnorm > 0 else 1.0
            arrays = {}
            for key, w in params.items():
                velocity[key] = config.momentum * velocity[key] + shrink * grads[key]
                arrays[key] = w - config.lr * velocity[key]
            params = ParameterStore(arrays)
            epoch_loss += loss * m
        losses.append(epoch_loss / n)
        if not math.isfinite(losses[-1]):
            raise TrainingDivergedError("training loss is not finite")
    return DenoiserModel(model.arch, params, schedule), losses


def _chain_normals(seed, n: int, steps: int) -> np.ndarray:
    """(n, steps, 2) standard normals; chain i uses its own stream keyed by (*seed, i)."""
    key = [int(s) for s in np.atleast_1d(seed)]
    out = np.empty((n, steps, DATA_DIM))
    for i in range(n):
        out[i] = np.random.default_rng([*key, i]).standard_normal((steps, DATA_DIM))
    return out


def sample(model: DenoiserModel, c, schedule: NoiseSchedule | None, seed, n: int,
           guidance: float = 0.0) -> np.ndarray:
    """Ancestral sampling of ``n`` points conditioned on concept ``c``.

    ``schedule=None`` uses the model's own schedule. ``seed`` is an int or a
    tuple of ints naming a sub-stream.
    """
    model.check_condition(c)
    schedule = schedule or model.schedule
    if n == 0:
        return np.empty((0, DATA_DIM))
    T = schedule.T
    # noise[:, 0] seeds x_T; noise[:, T - t + 1] is the fresh draw at step t.
    noise = _chain_normals(seed, n, T + 1)
    x = noise[:, 0]
    base = model.arch.base_index
    for t in range(T, 0, -1):
        beta = schedule.betas[t - 1]
        ab = schedule.alpha_bars[t - 1]
        eps_hat = model.predict_noise(x, c, t)
        if guidance:
            eps_hat = (1.0 + guidance) * eps_hat - guidance * model.predict_noise(x, base, t)
        x = (x - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(1.0 - beta)
        if t > 1:
            x = x + math.sqrt(beta) * noise[:, T - t + 1]
    return x


class ConditionalDiffusion(BaseEstimator):
    """Estimator wrapper: ``fit(X, y)`` trains a denoiser on labelled points."""

    def __init__(self, hidden=128, emb=64, n_concepts=4, T=100, beta_min=DEFAULT_BETAS[0], beta_max=DEFAULT_BETAS[1],
                 epochs=100, batch_size=256, lr=0.02, momentum=0.9, cond_dropout=0.1, seed=0,
                 emb_scale=DEFAULT_EMB_SCALE, clip_norm=1.0):
        self.hidden = hidden
        self.emb = emb
        self.n_concepts = n_concepts
        self.T = T
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.cond_dropout = cond_dropout
        self.seed = seed
        self.emb_scale = emb_scale
        self.clip_norm = clip_norm

    def _arch(self) -> Architecture:
        return Architecture(self.hidden, self.emb, self.n_concepts, self.T)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.momentum, self.cond_dropout, self.seed,
                           self.clip_norm)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        if X.shape[1] != DATA_DIM:
            raise ValueError(f"expected {DATA_DIM} features, got {X.shape[1]}")
        self.schedule_ = build_schedule(self.T, self.beta_min, self.beta_max)
        init = DenoiserModel.initialize(self._arch(), seed=self.seed, schedule=self.schedule_,
                                        emb_scale=self.emb_scale)
        self.model_, self.loss_curve_ = train(init, X, y, self.schedule_, self._train_config())
        return self

    def sample(self, c, n, seed=0, guidance=0.0):
        check_is_fitted(self, "model_")
        return sample(self.model_, c, self.schedule_, seed, n, guidance)

    def predict_noise(self, X, c, t):
        check_is_fitted(self, "model_")
        return self.model_.predict_noise(X, c, t)

