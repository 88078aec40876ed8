"""Nested neural estimator of the indirect rate-distortion curve.

The outer network ``T`` shapes the reproduction law ``Q_Y`` by descending
the empirical Lagrangian

    L = -(1/n) sum_i log( (1/m) sum_j exp(-lam * g(x_i, T(z_j))) ),

while the inner network ``g`` keeps regressing ``d(s, y)`` onto ``(x, y)``.
All kappa arithmetic is done in the log domain.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import nn
from .data import Dataset, draw_fresh
from .distortion import (
    AuxiliarySamplerSpec,
    DistortionSpec,
    ReducedDistortionModel,
    distortion,
    grid_input_grad,
    make_reduced_model,
    reduced_distortion_grid,
    refit_output_layer,
    regression_step,
    sample_auxiliary,
)
from .errors import ConfigurationError, NumericalError
from .mapping import BasisSpec, MappingModel, make_mapping, map_with_tape, mapping_backward, sample_basis

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


# --------------------------------------------------------------------------
# empirical estimators
# --------------------------------------------------------------------------


def log_kappa(lam: float, g_values) -> np.ndarray:
    g = np.asarray(g_values, dtype=np.float64)
    if np.any(g < 0):
        raise ConfigurationError("reduced distortions must be clamped to be nonnegative")
    if lam < 0:
        raise ConfigurationError("lambda must be nonnegative")
    return -lam * g


def _row_logsumexp(a: np.ndarray) -> np.ndarray:
    top = a.max(axis=1, keepdims=True)
    return top[:, 0] + np.log(np.exp(a - top).sum(axis=1))


def softmax_weights(log_k: np.ndarray) -> np.ndarray:
    """Row-wise softmax of log kappa: the tilted weights over reproductions."""
    a = np.atleast_2d(log_k)
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def outer_loss(log_k) -> float:
    """``-(1/n) sum_i [logsumexp_j(log kappa_ij) - log m]``."""
    a = np.atleast_2d(np.asarray(log_k, dtype=np.float64))
    return float(-np.mean(_row_logsumexp(a) - math.log(a.shape[1])))


def estimate_distortion(log_k, g_values) -> float:
    a = np.atleast_2d(np.asarray(log_k, dtype=np.float64))
    g = np.atleast_2d(np.asarray(g_values, dtype=np.float64))
    return float(np.mean(np.sum(softmax_weights(a) * g, axis=1)))


def estimate_rate(F_hat: float, lam: float, D_hat: float) -> float:
    return F_hat - lam * D_hat


# --------------------------------------------------------------------------
# reduced-distortion back ends
# --------------------------------------------------------------------------


class LearnedReduced:
    """Adapter exposing a trainable :class:`ReducedDistortionModel` to the outer loop."""

    trainable = True

    def __init__(self, model: ReducedDistortionModel, clamp: bool = True):
        self.model = model
        self.clamp = clamp

    def grid(self, x, y):
        return reduced_distortion_grid(self.model, x, y, clamp=self.clamp)

    def input_grad(self, tape, grad_g):
        return grid_input_grad(self.model, tape, grad_g, clamp=self.clamp)


class AnalyticReduced:
    """A known reduced distortion ``fn(x, y)`` with its ``y`` gradient, used in place of ``g``.

    Both callables receive ``x`` of shape ``(n, 1, dx)`` and ``y`` of shape
    ``(1, m, dy)``; ``fn`` returns ``(n, m)`` and ``grad_y`` ``(n, m, dy)``.
    """

    trainable = False

    def __init__(self, fn: Callable, grad_y: Callable):
        self.fn = fn
        self.grad_y = grad_y

    def grid(self, x, y):
        xb = np.atleast_2d(x)[:, None, :]
        yb = np.atleast_2d(y)[None, :, :]
        return np.maximum(self.fn(xb, yb), 0.0), (xb, yb)

    def input_grad(self, tape, grad_g):
        xb, yb = tape
        return np.einsum("ij,ijk->jk", grad_g, self.grad_y(xb, yb))


def gaussian_reduced(K_W, H) -> AnalyticReduced:
    """``tr(K_W) + ||H x - y||^2`` as an analytic back end."""
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    c = float(np.trace(np.atleast_2d(K_W)))

    def fn(x, y):
        return c + np.sum((x @ H.T - y) ** 2, axis=-1)

    def grad_y(x, y):
        return 2.0 * (y - x @ H.T)

    return AnalyticReduced(fn, grad_y)


def constant_reduced(value: float) -> AnalyticReduced:
    return AnalyticReduced(
        lambda x, y: np.full((x.shape[0], y.shape[1]), float(value)),
        lambda x, y: np.zeros((x.shape[0], y.shape[1], y.shape[2])),
    )


# --------------------------------------------------------------------------
# configuration and results
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one NEIRD run. Defaults are engineering choices."""

    lam: float = 1.0
    distortion: str = "squared_error"
    n: int = 128
    m: int = 256
    b: int = 256
    eta: float = 2e-3
    xi: float = 2e-3
    epochs: int = 1000
    t: int = 5
    warmup_steps: int = 1000
    seed: int = 0
    optimizer: str = "adam"
    # reduced-distortion network
    g_hidden: tuple[int, ...] = (64, 64)
    g_activation: str = "tanh"
    clamp: bool = True
    # reproduction mapping
    T_hidden: tuple[int, ...] = (32, 32)
    T_activation: str = "relu"
    basis: str = "standard_gaussian"
    basis_dim: int | None = None
    frozen_z: bool = False
    # auxiliary reproductions for the regression
    aux_strategy: str = "mixture"
    aux_weight: float = 0.5
    aux_broad: str = "auto"
    aux_scale: float | tuple[float, ...] | None = None
    tilted_fraction: float = 0.5
    lr_decay: float = 0.1
    refit_every: int = 50
    refit_x: int = 1000  # 0 disables the closed-form refit
    refit_per_x: int = 8
    # data handling and evaluation
    x_source: str = "resample"
    n_eval: int = 2000
    m_eval: int = 2000
    early_stop: bool = False
    early_stop_window: int = 20
    early_stop_rtol: float = 1e-4

    def __post_init__(self):
        for name in ("n", "m", "b", "epochs", "n_eval", "m_eval"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.t < 0 or self.warmup_steps < 0:
            raise ConfigurationError("t and warmup_steps must be >= 0")
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ConfigurationError("lambda must be finite and nonnegative")
        if self.eta <= 0 or self.xi <= 0:
            raise ConfigurationError("learning rates must be positive")
        if not 0.0 <= self.tilted_fraction <= 1.0:
            raise ConfigurationError("tilted_fraction must lie in [0, 1]")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigurationError("lr_decay must lie in (0, 1]")
        if self.x_source not in ("resample", "fresh"):
            raise ConfigurationError(f"unknown x_source {self.x_source!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("g_hidden", "T_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        if isinstance(d.get("aux_scale"), list):
            d["aux_scale"] = tuple(d["aux_scale"])
        return cls(**d)


@dataclass
class LagrangianPoint:
    lam: float
    D_hat: float
    R_hat: float
    F_hat: float
    seed: int = 0
    epochs: int = 0
    status: str = "ok"
    message: str = ""
    diagnostics: dict = field(default_factory=dict, repr=False)

    @property
    def R_bits(self) -> float:
        return self.R_hat / LN2

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def convex_envelope(points: Sequence[LagrangianPoint], D_grid) -> np.ndarray:
    """``R(D) = max(0, max_k F_k - lam_k D)`` on ``D_grid`` (nats)."""
    pts = [p for p in points if p.ok and math.isfinite(p.F_hat)]
    if not pts:
        raise ConfigurationError("envelope needs at least one finite point")
    D = np.asarray(D_grid, dtype=np.float64)
    lines = np.array([[p.F_hat, p.lam] for p in pts])
    vals = lines[:, :1] - lines[:, 1:] * D[None, :]
    return np.maximum(vals.max(axis=0), 0.0)


@dataclass
class RDCurve:
    points: list[LagrangianPoint]

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.lam)

    @property
    def ok_points(self) -> list[LagrangianPoint]:
        return [p for p in self.points if p.ok]

    def envelope(self, D_grid) -> np.ndarray:
        return convex_envelope(self.points, D_grid)

    def default_grid(self, count: int = 200) -> np.ndarray:
        D = [p.D_hat for p in self.ok_points]
        lo, hi = min(D), max(D)
        pad = 0.05 * (hi - lo) + 1e-12
        return np.linspace(max(lo - pad, 0.0), hi + pad, count)


@dataclass
class NeirdModels:
    mapping: MappingModel
    reduced: LearnedReduced | AnalyticReduced

    def snapshot(self) -> "NeirdModels":
        reduced = self.reduced
        if isinstance(reduced, LearnedReduced):
            reduced = LearnedReduced(reduced.model.snapshot(), reduced.clamp)
        return NeirdModels(self.mapping.snapshot(), reduced)


# --------------------------------------------------------------------------
# setup
# --------------------------------------------------------------------------


def distortion_spec_for(config: TrainConfig, dataset: Dataset) -> DistortionSpec:
    if config.distortion == "squared_error":
        s = np.atleast_2d(dataset.s.reshape(len(dataset), -1))
        return DistortionSpec("squared_error", dim=s.shape[1])
    k = int(dataset.s.max()) + 1
    return DistortionSpec(config.distortion, alphabet_size=max(k, 2))


def aux_spec_for(config: TrainConfig, dspec: DistortionSpec, dataset: Dataset) -> AuxiliarySamplerSpec:
    broad = config.aux_broad
    if broad == "auto":
        broad = "normal" if not dspec.discrete else ("vertices" if dspec.kind == "hamming" else "dirichlet")
    scale = config.aux_scale
    if scale is None:
        if dspec.discrete:
            scale = 1.0
        else:
            # a fixed width chosen once from the data
            s = dataset.s.reshape(len(dataset), -1)
            scale = tuple(float(v) for v in s.std(axis=0))
    loc = 0.0
    if not dspec.discrete:
        loc = tuple(float(v) for v in dataset.s.reshape(len(dataset), -1).mean(axis=0))
    return AuxiliarySamplerSpec(
        dim=dspec.y_dim, strategy=config.aux_strategy, weight=config.aux_weight,
        broad=broad, loc=loc, scale=scale, seed=config.seed + 3,
    )


def init_models(config: TrainConfig, dataset: Dataset, dspec: DistortionSpec, aux: AuxiliarySamplerSpec) -> NeirdModels:
    rng = np.random.default_rng(config.seed)
    y_dim = dspec.y_dim
    basis = BasisSpec(config.basis, config.basis_dim or y_dim, config.seed + 1)
    head = "softmax" if dspec.discrete else "linear"
    mapping = make_mapping(basis, y_dim, config.T_hidden, config.T_activation, head,
                           seed=config.seed + 2, optimizer=config.optimizer)

    # fixed input/output scalings taken from a pilot batch
    s, x = dataset.sample(min(len(dataset), 4096), rng)
    y = sample_auxiliary(replace(aux, strategy="broad"), len(x), rng)
    xy = np.concatenate([x, y], axis=1)
    target = distortion(dspec, s, y)
    reduced = make_reduced_model(
        dataset.x_dim, y_dim, config.g_hidden, config.g_activation, seed=config.seed + 4,
        optimizer=config.optimizer, in_shift=xy.mean(axis=0), in_scale=xy.std(axis=0) + 1e-8,
        out_shift=float(np.mean(target)), distortion_spec=dspec,
    )
    return NeirdModels(mapping, LearnedReduced(reduced, config.clamp))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def _draw_x(config: TrainConfig, dataset: Dataset, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if config.x_source == "fresh":
        return draw_fresh(dataset.metadata, count, rng)
    return dataset.sample(count, rng)


def evaluate_objective(models: NeirdModels, x, z, lam: float) -> tuple[float, float, float]:
    """``(F_hat, D_hat, R_hat)`` on the given samples, without training."""
    y = map_with_tape(models.mapping, z)[0]
    G = np.empty((len(x), len(y)))
    for start in range(0, len(x), 64):
        G[start:start + 64] = models.reduced.grid(x[start:start + 64], y)[0]
    lk = log_kappa(lam, G)
    F = outer_loss(lk)
    D = estimate_distortion(lk, G)
    return F, D, estimate_rate(F, lam, D)


def outer_step(
    mapping: MappingModel,
    reduced,
    x: np.ndarray,
    z: np.ndarray,
    lam: float,
    eta: float,
    return_weights: bool = False,
):
    """One descent step of ``T`` on the empirical Lagrangian; ``g``'s weights stay fixed.

    Returns ``(mapping', loss)`` with the loss evaluated before the step, or
    ``(mapping', loss, y, weights)`` with ``return_weights``, where
    ``weights[i]`` is the tilted law over the reproductions ``y`` for ``x_i``.
    """
    y, tape_T = map_with_tape(mapping, z)
    G, tape_g = reduced.grid(x, y)
    lk = log_kappa(lam, G)
    loss = outer_loss(lk)
    if not math.isfinite(loss):
        raise NumericalError(f"outer loss is not finite at lambda={lam}")
    W = softmax_weights(lk)
    if lam > 0:
        # dL/dG_ij = lam * W_ij / n
        grad_y = reduced.input_grad(tape_g, (lam / len(x)) * W)
        grads = mapping_backward(mapping, tape_T, grad_y)
        params, state = nn.optimizer_step(mapping.params, grads, mapping.opt_state, eta)
        mapping = MappingModel(params, mapping.basis, mapping.head, state)
    if return_weights:
        return mapping, loss, y, W
    return mapping, loss


@dataclass
class _TiltedPool:
    """``(s_i, x_i)`` from the last outer step with their tilted laws over ``y``.

    Reproductions drawn from row ``i`` depend on ``x_i`` and the networks
    only, never on ``s_i``, so the regression target is still ``d_bar``.
    """

    s: np.ndarray
    x: np.ndarray
    y: np.ndarray
    cdf: np.ndarray

    def draw(self, count: int, rng: np.random.Generator):
        rows = rng.integers(len(self.x), size=count)
        u = rng.random(count)
        cols = np.minimum((self.cdf[rows] < u[:, None]).sum(axis=1), self.y.shape[0] - 1)
        return self.s[rows], self.x[rows], self.y[cols]


def _inner_steps(config, models, dataset, dspec, aux, rng, steps: int, pool: _TiltedPool | None = None, lr: float | None = None) -> None:
    if not models.reduced.trainable or steps == 0:
        return
    lr = config.xi if lr is None else lr
    pushforward = models.mapping.pushforward()
    k = int(round(config.tilted_fraction * config.b)) if pool is not None else 0
    for _ in range(steps):
        s, x = dataset.sample(config.b - k, rng)
        y = sample_auxiliary(aux, config.b - k, rng, pushforward)
        if k:
            ps, px, py = pool.draw(k, rng)
            s, x, y = np.concatenate([s, ps]), np.concatenate([x, px]), np.concatenate([y, py])
        loss = regression_step(models.reduced.model, x, y, distortion(dspec, s, y), lr)
        if not math.isfinite(loss):
            raise NumericalError("non-finite regression loss")


def _refit(config, models, dataset, dspec, aux, lam, rng) -> None:
    """Closed-form solve of ``g``'s output layer on tilted plus auxiliary pairs."""
    if not models.reduced.trainable or config.refit_x == 0:
        return
    s, x = dataset.sample(config.refit_x, rng)
    z = sample_basis(models.mapping.basis, config.m, rng)
    y = map_with_tape(models.mapping, z)[0]
    G = np.empty((len(x), len(y)))
    for start in range(0, len(x), 128):
        G[start:start + 128] = models.reduced.grid(x[start:start + 128], y)[0]
    pool = _TiltedPool(s, x, y, np.cumsum(softmax_weights(log_kappa(lam, G)), axis=1))
    count = config.refit_x * config.refit_per_x
    k = int(round(config.tilted_fraction * count))
    ts, tx, ty = pool.draw(k, rng)
    bs, bx = dataset.sample(count - k, rng)
    by = sample_auxiliary(aux, count - k, rng, models.mapping.pushforward())
    s, x, y = np.concatenate([ts, bs]), np.concatenate([tx, bx]), np.concatenate([ty, by])
    refit_output_layer(models.reduced.model, x, y, distortion(dspec, s, y))


def _decay(config: TrainConfig, epoch: int) -> float:
    """Cosine factor from 1 down to ``lr_decay`` over the run."""
    if config.epochs <= 1:
        return 1.0
    frac = epoch / (config.epochs - 1)
    return config.lr_decay + (1 - config.lr_decay) * 0.5 * (1 + math.cos(math.pi * frac))


def fit_neird(
    config: TrainConfig,
    dataset: Dataset,
    init: NeirdModels | None = None,
    reduced=None,
) -> tuple[LagrangianPoint, NeirdModels]:
    """Train both networks at one slope and report the tangent point.

    ``init`` warm-starts from earlier models (they are copied, not mutated).
    ``reduced`` substitutes an analytic back end for the learned ``g``.
    """
    if len(dataset) < 1:
        raise ConfigurationError("dataset is empty")
    started = time.perf_counter()
    dspec = distortion_spec_for(config, dataset)
    aux = aux_spec_for(config, dspec, dataset)
    models = init.snapshot() if init is not None else init_models(config, dataset, dspec, aux)
    if reduced is not None:
        models = NeirdModels(models.mapping, reduced)
    rng = np.random.default_rng([config.seed, 17])
    lam = config.lam

    if init is None:
        _inner_steps(config, models, dataset, dspec, replace(aux, strategy="broad"), rng, config.warmup_steps)
        if config.refit_every:
            _refit(config, models, dataset, dspec, aux, lam, rng)

    z_fixed = sample_basis(models.mapping.basis, config.m, rng) if config.frozen_z else None
    outer_hist: list[float] = []
    epochs_run = 0
    for epoch in range(config.epochs):
        decay = _decay(config, epoch)
        s, x = _draw_x(config, dataset, config.n, rng)
        z = z_fixed if z_fixed is not None else sample_basis(models.mapping.basis, config.m, rng)
        models.mapping, loss, y, W = outer_step(
            models.mapping, models.reduced, x, z, lam, config.eta * decay, return_weights=True
        )
        outer_hist.append(loss)
        pool = _TiltedPool(s, x, y, np.cumsum(W, axis=1)) if config.tilted_fraction > 0 else None
        _inner_steps(config, models, dataset, dspec, aux, rng, config.t, pool, config.xi * decay)
        epochs_run = epoch + 1
        if config.refit_every and epochs_run % config.refit_every == 0:
            _refit(config, models, dataset, dspec, aux, lam, rng)
        if config.early_stop and epoch >= 2 * config.early_stop_window:
            w = config.early_stop_window
            prev = np.mean(outer_hist[-2 * w:-w])
            cur = np.mean(outer_hist[-w:])
            if abs(cur - prev) <= config.early_stop_rtol * max(abs(prev), 1e-12):
                break

    if config.refit_every:
        _refit(config, models, dataset, dspec, aux, lam, rng)
    eval_rng = np.random.default_rng([config.seed, 29])
    _, x_eval = _draw_x(config, dataset, config.n_eval, eval_rng)
    z_eval = sample_basis(models.mapping.basis, config.m_eval, eval_rng)
    F, D, R = evaluate_objective(models, x_eval, z_eval, lam)
    if not all(map(math.isfinite, (F, D, R))):
        raise NumericalError(f"non-finite estimate at lambda={lam}")
    inner_hist = models.reduced.model.loss_history if models.reduced.trainable else []
    point = LagrangianPoint(
        lam=lam, D_hat=D, R_hat=R, F_hat=F, seed=config.seed, epochs=epochs_run,
        diagnostics={
            "outer_loss": outer_hist,
            "inner_loss_tail": list(inner_hist[-200:]),
            "seconds": time.perf_counter() - started,
        },
    )
    log.info("lambda=%g D=%.5f R=%.5f nats (%.1fs)", lam, D, R, point.diagnostics["seconds"])
    return point, models


def run_neird(config: TrainConfig, dataset: Dataset, init: NeirdModels | None = None, reduced=None) -> LagrangianPoint:
    return fit_neird(config, dataset, init, reduced)[0]


def sweep_lambda(
    base_config: TrainConfig,
    lams: Sequence[float],
    dataset: Dataset,
    warm_start: bool = True,
    reduced=None,
    warm_epochs: int | None = None,
    on_point: Callable[[LagrangianPoint, NeirdModels | None], None] | None = None,
) -> RDCurve:
    """One tangent point per slope, visited in increasing order.

    With ``warm_start`` each run starts from the previous run's networks and
    trains for ``warm_epochs`` (defaults to the base epoch count). A failed
    point is recorded with ``status="diverged"`` and the sweep moves on.
    """
    lams = sorted(float(v) for v in lams)
    if not lams:
        raise ConfigurationError("lambda list is empty")
    if any(v < 0 for v in lams):
        raise ConfigurationError("lambda values must be nonnegative")
    points, prev = [], None
    for lam in lams:
        cfg = replace(base_config, lam=lam)
        if warm_start and prev is not None and warm_epochs is not None:
            cfg = replace(cfg, epochs=warm_epochs)
        try:
            point, models = fit_neird(cfg, dataset, prev if warm_start else None, reduced)
        except NumericalError as exc:
            log.warning("lambda=%g diverged: %s", lam, exc)
            point = LagrangianPoint(lam, math.nan, math.nan, math.nan, cfg.seed, 0, "diverged", str(exc))
            models = None
        else:
            prev = models
        points.append(point)
        if on_point is not None:
            on_point(point, models)
    return RDCurve(points)


def log_spaced_lambdas(lo: float, hi: float, count: int) -> list[float]:
    if count == 1:
        return [float(lo)]
    return [float(v) for v in np.geomspace(lo, hi, count)]
