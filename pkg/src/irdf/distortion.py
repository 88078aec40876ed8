"""Distortion measures, analytic reduced distortions and the learned estimator.

The learned estimator ``g(x, y)`` is fitted by least squares against
``d(s, y)`` with ``y`` drawn independently of ``(s, x)``; the regression
minimiser is then ``E[d(S, y) | X = x]``, the reduced distortion.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .errors import ConfigurationError, DimensionError, NumericalError

KINDS = ("squared_error", "hamming", "log_loss", "cross_entropy")
SIMPLEX_ATOL = 1e-9


@dataclass(frozen=True)
class DistortionSpec:
    """Which measure to use plus the shape of ``s`` and ``y``.

    ``dim`` is the vector length for ``squared_error``; ``alphabet_size`` is
    the number of source symbols for the discrete kinds, whose reproductions
    are probability vectors over that alphabet (a one-hot vector for a hard
    Hamming decision).
    """

    kind: str
    dim: int | None = None
    alphabet_size: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown distortion kind {self.kind!r}")
        if self.kind == "squared_error" and (self.dim is None or self.dim < 1):
            raise ConfigurationError("squared_error needs dim >= 1")
        if self.kind != "squared_error" and (self.alphabet_size is None or self.alphabet_size < 2):
            raise ConfigurationError(f"{self.kind} needs alphabet_size >= 2")

    @property
    def discrete(self) -> bool:
        return self.kind != "squared_error"

    @property
    def y_dim(self) -> int:
        return self.dim if self.kind == "squared_error" else self.alphabet_size

    @property
    def s_dim(self) -> int:
        return self.dim if self.kind == "squared_error" else 1


def _check_simplex(y: np.ndarray) -> None:
    if np.any(y < 0) or np.any(np.abs(y.sum(axis=-1) - 1.0) > SIMPLEX_ATOL):
        raise ConfigurationError("reproduction is not a probability vector")


def distortion(spec: DistortionSpec, s, y) -> np.ndarray | float:
    """``d(s, y)`` for one pair or a batch of pairs.

    For the discrete kinds ``s`` holds integer labels. A Hamming reproduction
    may be an integer label (giving ``1{s != y}``) or a probability vector
    (giving the expected Hamming loss ``1 - y[s]``). Log loss and
    cross-entropy both evaluate ``-log y[s]`` in nats.
    """
    y = np.asarray(y)
    if spec.kind == "squared_error":
        s = np.asarray(s, dtype=np.float64)
        y = y.astype(np.float64)
        if s.shape[-1:] != (spec.dim,) or y.shape[-1:] != (spec.dim,):
            raise DimensionError(f"expected vectors of length {spec.dim}")
        out = np.sum((s - y) ** 2, axis=-1)
        return float(out) if out.ndim == 0 else out

    s = np.asarray(s)
    if not np.issubdtype(s.dtype, np.integer):
        if np.any(s != np.round(s)):
            raise ConfigurationError("discrete source symbols must be integers")
        s = s.astype(np.int64)
    k = spec.alphabet_size
    if np.any(s < 0) or np.any(s >= k):
        raise ConfigurationError(f"source symbol outside alphabet of size {k}")

    if spec.kind == "hamming" and np.issubdtype(y.dtype, np.integer) and y.shape == s.shape:
        if np.any(y < 0) or np.any(y >= k):
            raise ConfigurationError(f"reproduction outside alphabet of size {k}")
        out = (s != y).astype(np.float64)
        return float(out) if out.ndim == 0 else out

    y = y.astype(np.float64)
    if y.shape[-1] != k or y.shape[:-1] != s.shape:
        raise DimensionError(f"reproduction shape {y.shape} does not match labels {s.shape} / alphabet {k}")
    _check_simplex(y)
    picked = np.take_along_axis(y.reshape(-1, k), s.reshape(-1, 1), axis=1)[:, 0].reshape(s.shape)
    if spec.kind == "hamming":
        out = 1.0 - picked
    else:
        with np.errstate(divide="ignore"):
            out = -np.log(picked)
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def analytic_reduced_gaussian(K_W, H, x, y) -> np.ndarray | float:
    """``tr(K_W) + ||H x - y||^2`` for the model ``S = H X + W``."""
    K_W = np.atleast_2d(np.asarray(K_W, dtype=np.float64))
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if K_W.shape != (H.shape[0], H.shape[0]):
        raise DimensionError(f"K_W {K_W.shape} does not match H {H.shape}")
    if x.shape[-1] != H.shape[1] or y.shape[-1] != H.shape[0]:
        raise DimensionError("x or y does not match H")
    out = np.trace(K_W) + np.sum((x @ H.T - y) ** 2, axis=-1)
    return float(out) if out.ndim == 0 else out


def posterior_label0(A: float, sigma: float, x) -> np.ndarray | float:
    """``P(S = 0 | X = x)`` for ``X ~ N(A, s^2)`` if ``S = 0`` and ``N(-A, s^2)`` otherwise."""
    if sigma <= 0:
        raise ConfigurationError("sigma must be positive")
    x = np.asarray(x, dtype=np.float64)
    # N+/(N+ + N-) = 1 / (1 + exp(-2 A x / sigma^2)), evaluated stably
    out = np.exp(-np.logaddexp(0.0, -2.0 * A * x / sigma**2))
    return float(out) if out.ndim == 0 else out


def analytic_reduced_binary(A: float, sigma: float, x, y) -> np.ndarray | float:
    """Posterior probability that the label differs from ``y`` (reduced Hamming loss).

    ``y`` may be a label in {0, 1} or a probability vector of length 2.
    """
    p0 = np.asarray(posterior_label0(A, sigma, x))
    y = np.asarray(y)
    if y.ndim > p0.ndim:
        out = y[..., 0] * (1.0 - p0) + y[..., 1] * p0
    else:
        if np.any((y != 0) & (y != 1)):
            raise ConfigurationError("binary reproduction must be 0 or 1")
        out = np.where(y == 0, 1.0 - p0, p0)
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# auxiliary reproductions
# --------------------------------------------------------------------------

STRATEGIES = ("broad", "pushforward", "mixture")
BROAD_KINDS = ("uniform", "normal", "dirichlet", "vertices")


@dataclass(frozen=True)
class AuxiliarySamplerSpec:
    """How auxiliary reproductions are drawn for the regression.

    ``weight`` is the probability of taking a pushforward sample under the
    ``mixture`` strategy. ``broad`` picks the fixed wide distribution:
    ``uniform`` on ``[low, high]^dim``, ``normal(loc, scale)``, a flat
    Dirichlet on the simplex, or a mix of simplex vertices and Dirichlet
    draws (``vertices``).
    """

    dim: int
    strategy: str = "mixture"
    weight: float = 0.5
    broad: str = "normal"
    low: float = -5.0
    high: float = 5.0
    loc: tuple[float, ...] | float = 0.0
    scale: tuple[float, ...] | float = 1.0
    concentration: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown auxiliary strategy {self.strategy!r}")
        if self.broad not in BROAD_KINDS:
            raise ConfigurationError(f"unknown broad distribution {self.broad!r}")
        if not 0.0 <= self.weight <= 1.0:
            raise ConfigurationError("mixture weight must lie in [0, 1]")
        if self.dim < 1:
            raise ConfigurationError("dim must be >= 1")


Pushforward = Callable[[int, np.random.Generator], np.ndarray]


def _sample_broad(aux: AuxiliarySamplerSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    if aux.broad == "uniform":
        return rng.uniform(aux.low, aux.high, size=(count, aux.dim))
    if aux.broad == "normal":
        loc = np.broadcast_to(np.asarray(aux.loc, dtype=np.float64), (aux.dim,))
        scale = np.broadcast_to(np.asarray(aux.scale, dtype=np.float64), (aux.dim,))
        return loc + scale * rng.standard_normal((count, aux.dim))
    y = rng.dirichlet(np.full(aux.dim, aux.concentration), size=count)
    if aux.broad == "vertices":
        hard = rng.random(count) < 0.5
        y[hard] = np.eye(aux.dim)[rng.integers(aux.dim, size=int(hard.sum()))]
    return y


def sample_auxiliary(
    aux: AuxiliarySamplerSpec,
    count: int,
    rng: np.random.Generator | None = None,
    pushforward: Pushforward | None = None,
) -> np.ndarray:
    """Draw ``count`` auxiliary reproductions, shape ``(count, dim)``.

    The sampler is never given source or observation data, so the drawn ``y``
    is independent of ``(s, x)`` and the Markov chain ``S - X - Y`` holds.
    """
    if rng is None:
        rng = np.random.default_rng(aux.seed)
    if aux.strategy == "broad" or (aux.strategy == "mixture" and aux.weight == 0.0):
        return _sample_broad(aux, count, rng)
    if pushforward is None:
        raise ConfigurationError(f"{aux.strategy} strategy needs a pushforward sampler")
    if aux.strategy == "pushforward" or aux.weight == 1.0:
        return np.asarray(pushforward(count, rng), dtype=np.float64)
    take = rng.random(count) < aux.weight
    y = _sample_broad(aux, count, rng)
    k = int(take.sum())
    if k:
        y[take] = pushforward(k, rng)
    return y


# --------------------------------------------------------------------------
# learned reduced distortion
# --------------------------------------------------------------------------


@dataclass(eq=False)
class ReducedDistortionModel:
    """Network ``g(x, y)`` on the concatenated input, with fixed affine scalings.

    Inputs are standardised with ``in_shift``/``in_scale`` and the output is
    ``out_shift + out_scale * net(...)``; these constants are set once and
    never trained.
    """

    params: nn.NetworkParameters
    x_dim: int
    y_dim: int
    in_shift: np.ndarray
    in_scale: np.ndarray
    out_shift: float = 0.0
    out_scale: float = 1.0
    opt_state: nn.OptimizerState | None = None
    loss_history: list[float] = field(default_factory=list)
    distortion_spec: DistortionSpec | None = None

    def snapshot(self) -> "ReducedDistortionModel":
        return ReducedDistortionModel(
            self.params, self.x_dim, self.y_dim, self.in_shift.copy(), self.in_scale.copy(),
            self.out_shift, self.out_scale, self.opt_state, list(self.loss_history),
            self.distortion_spec,
        )


def make_reduced_model(
    x_dim: int,
    y_dim: int,
    hidden: tuple[int, ...] = (64, 64),
    activation: str = "tanh",
    seed: int = 0,
    optimizer: str = "adam",
    in_shift=None,
    in_scale=None,
    out_shift: float = 0.0,
    out_scale: float = 1.0,
    distortion_spec: DistortionSpec | None = None,
) -> ReducedDistortionModel:
    width = x_dim + y_dim
    spec = nn.mlp_spec((width, *hidden, 1), hidden=activation, output="identity")
    params = nn.init_network(spec, seed)
    shift = np.zeros(width) if in_shift is None else np.asarray(in_shift, dtype=np.float64)
    scale = np.ones(width) if in_scale is None else np.asarray(in_scale, dtype=np.float64)
    if shift.shape != (width,) or scale.shape != (width,) or np.any(scale <= 0):
        raise ConfigurationError("input normalisation must have one positive scale per input")
    return ReducedDistortionModel(
        params, x_dim, y_dim, shift, scale, float(out_shift), float(out_scale),
        nn.init_optimizer(params, optimizer), [], distortion_spec,
    )


def _model_inputs(model: ReducedDistortionModel, x, y) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != model.x_dim or y.shape[1] != model.y_dim:
        raise DimensionError(
            f"expected x of width {model.x_dim} and y of width {model.y_dim}, got {x.shape}, {y.shape}"
        )
    return (np.concatenate([x, y], axis=1) - model.in_shift) / model.in_scale


def reduced_distortion(model: ReducedDistortionModel, x, y, clamp: bool = True):
    """Evaluate ``g`` on paired rows of ``x`` and ``y``; clamp at zero if asked."""
    single = np.ndim(x) == 1 and np.ndim(y) == 1
    out, _ = nn.forward(model.params, _model_inputs(model, x, y))
    g = model.out_shift + model.out_scale * out[:, 0]
    if clamp:
        g = np.maximum(g, 0.0)
    return float(g[0]) if single else g


def reduced_distortion_grid(model: ReducedDistortionModel, x, y, clamp: bool = True):
    """``g(x_i, y_j)`` for every pair; returns ``(G, tape)`` with ``G`` of shape ``(n, m)``.

    The tape is what :func:`grid_input_grad` needs to push gradients back
    onto ``y``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    n, m = len(x), len(y)
    xx = np.repeat(x, m, axis=0)
    yy = np.tile(y, (n, 1))
    out, tape = nn.forward(model.params, _model_inputs(model, xx, yy))
    raw = (model.out_shift + model.out_scale * out[:, 0]).reshape(n, m)
    return (np.maximum(raw, 0.0) if clamp else raw), (tape, raw)


def grid_input_grad(model: ReducedDistortionModel, grid_tape, grad_g: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Gradient w.r.t. each ``y_j`` given ``dL/dG`` on the pair grid (``g``'s weights held fixed)."""
    tape, raw = grid_tape
    if clamp:
        grad_g = grad_g * (raw > 0)
    n, m = raw.shape
    gin = nn.input_gradient(model.params, tape, (model.out_scale * grad_g).reshape(-1, 1))
    gin = gin[:, model.x_dim:] / model.in_scale[model.x_dim:]
    return gin.reshape(n, m, model.y_dim).sum(axis=0)


def regression_step(model: ReducedDistortionModel, x, y, targets, lr: float) -> float:
    """One gradient step on ``mean((g(x, y) - targets)^2)``; returns the pre-step loss."""
    targets = np.asarray(targets, dtype=np.float64)
    out, tape = nn.forward(model.params, _model_inputs(model, x, y))
    g = model.out_shift + model.out_scale * out[:, 0]
    resid = g - targets
    loss = float(np.mean(resid**2))
    if not np.isfinite(loss):
        raise NumericalError("non-finite regression loss; step rejected")
    grad = (2.0 * model.out_scale / len(resid)) * resid[:, None]
    grads = nn.backward(model.params, tape, grad)
    model.params, model.opt_state = nn.optimizer_step(model.params, grads, model.opt_state, lr)
    model.loss_history.append(loss)
    return loss


def refit_output_layer(model: ReducedDistortionModel, x, y, targets, ridge: float = 1e-6) -> float:
    """Solve the last (linear) layer of ``g`` in closed form on the given pairs.

    Minimises the same quadratic loss as :func:`regression_step` over the
    output weights and bias only, with a small ridge term. Returns the
    resulting mean squared residual.
    """
    params = model.params
    if params.spec[-1].activation != "identity":
        raise ConfigurationError("closed-form refit needs a linear output layer")
    targets = np.asarray(targets, dtype=np.float64)
    inputs = _model_inputs(model, x, y)
    _, tape = nn.forward(params, inputs)
    feats = np.concatenate([tape.inputs[-1], np.ones((len(inputs), 1))], axis=1)
    rhs = (targets - model.out_shift) / model.out_scale
    gram = feats.T @ feats + ridge * len(feats) * np.eye(feats.shape[1])
    sol = np.linalg.solve(gram, feats.T @ rhs)
    if not np.all(np.isfinite(sol)):
        raise NumericalError("closed-form refit produced non-finite weights")
    weights = list(params.weights)
    biases = list(params.biases)
    weights[-1] = sol[None, :-1]
    biases[-1] = sol[-1:]
    model.params = nn.NetworkParameters(params.spec, tuple(weights), tuple(biases))
    resid = model.out_shift + model.out_scale * (feats @ sol) - targets
    return float(np.mean(resid**2))


def train_reduced_distortion_step(
    model: ReducedDistortionModel,
    minibatch: tuple[np.ndarray, np.ndarray],
    aux: AuxiliarySamplerSpec,
    spec: DistortionSpec,
    lr: float,
    rng: np.random.Generator,
    pushforward: Pushforward | None = None,
) -> ReducedDistortionModel:
    """Draw one auxiliary ``y`` per ``(s, x)`` and take a regression step."""
    s, x = minibatch
    if len(s) < 1:
        raise ConfigurationError("minibatch must hold at least one sample")
    y = sample_auxiliary(aux, len(s), rng, pushforward)
    regression_step(model, x, y, distortion(spec, s, y), lr)
    return model
