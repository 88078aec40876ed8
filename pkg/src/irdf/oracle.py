"""Reference curves: reverse water-filling, Blahut-Arimoto and closed forms.

Rates are in nats unless a function says otherwise.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .data import GaussianModelSpec
from .errors import ConfigurationError, InfeasibleError

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


def h2(p) -> np.ndarray | float:
    """Binary entropy in bits, with ``h2(0) = h2(1) = 0``."""
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -(np.where(p > 0, p * np.log2(p), 0.0) + np.where(p < 1, (1 - p) * np.log2(1 - p), 0.0))
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# Gaussian: reverse water-filling
# --------------------------------------------------------------------------


def water_level(variances, budget: float, max_iter: int = 200, tol: float = 1e-12) -> float:
    """Solve ``sum_k min(var_k, gamma) = budget`` for ``gamma`` by bisection."""
    v = np.asarray(variances, dtype=np.float64)
    if budget <= 0:
        raise InfeasibleError("distortion budget must be positive")
    if budget >= v.sum():
        return float(v.max())
    lo, hi = 0.0, float(v.max())
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        used = np.minimum(v, mid).sum()
        if abs(used - budget) <= tol:
            return mid
        if used < budget:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def gaussian_rdf(variances, budget: float) -> float:
    """Rate of a Gaussian vector with the given component variances at MSE ``budget``."""
    v = np.asarray(variances, dtype=np.float64)
    if budget >= v.sum():
        return 0.0
    gamma = water_level(v, budget)
    return float(0.5 * np.sum(np.log(v / np.minimum(v, gamma))))


def effective_variances(spec: GaussianModelSpec) -> np.ndarray:
    """Eigenvalues of ``H K_X H^T``: the spread of the MMSE estimate of ``S``."""
    return np.clip(np.linalg.eigvalsh(spec.H @ spec.K_X @ spec.H.T), 0.0, None)


def gaussian_irdf(spec: GaussianModelSpec, D_grid) -> np.ndarray:
    """Indirect rate at each ``D``; ``inf`` where ``D <= tr(K_W)``."""
    v = effective_variances(spec)
    v = v[v > 0]
    floor = float(np.trace(spec.K_W))
    D = np.atleast_1d(np.asarray(D_grid, dtype=np.float64))
    out = np.full(D.shape, np.inf)
    for k, d in enumerate(D):
        if d > floor:
            out[k] = gaussian_rdf(v, d - floor)
    return out


def gaussian_irdf_point(spec: GaussianModelSpec, D: float) -> float:
    floor = float(np.trace(spec.K_W))
    if D <= floor:
        raise InfeasibleError(f"D={D} is not above the noise floor tr(K_W)={floor}")
    return float(gaussian_irdf(spec, [D])[0])


def gaussian_irdf_at_slope(spec: GaussianModelSpec, lam: float) -> tuple[float, float]:
    """Tangent point ``(D, R)`` for slope ``-lam``: the water level is ``1/(2 lam)``."""
    if lam <= 0:
        raise ConfigurationError("slope must be positive")
    v = effective_variances(spec)
    gamma = 1.0 / (2.0 * lam)
    D = float(np.trace(spec.K_W) + np.minimum(v, gamma).sum())
    R = float(0.5 * np.sum(np.log(np.maximum(v, gamma) / gamma)))
    return D, R


# --------------------------------------------------------------------------
# Blahut-Arimoto for a discrete reduced distortion
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DiscreteIndirectSpec:
    p_x: np.ndarray
    d_bar: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p_x, dtype=np.float64)
        d = np.atleast_2d(np.asarray(self.d_bar, dtype=np.float64))
        object.__setattr__(self, "p_x", p)
        object.__setattr__(self, "d_bar", d)
        if d.shape[0] != p.shape[0]:
            raise ConfigurationError("d_bar rows must match the support of p_x")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ConfigurationError("p_x must be a probability vector")
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise ConfigurationError("d_bar must be finite and nonnegative")


@dataclass
class BAResult:
    rate: float  # nats
    distortion: float
    q_y: np.ndarray
    objective: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list, repr=False)


def _ba_quantities(spec: DiscreteIndirectSpec, lam: float, log_q: np.ndarray):
    # log P(y|x) = log q(y) - lam d(x,y) - log Z(x)
    a = log_q[None, :] - lam * spec.d_bar
    top = a.max(axis=1, keepdims=True)
    log_z = top[:, 0] + np.log(np.exp(a - top).sum(axis=1))
    log_cond = a - log_z[:, None]
    cond = np.exp(log_cond)
    F = float(-np.dot(spec.p_x, log_z))
    D = float(np.dot(spec.p_x, np.sum(cond * spec.d_bar, axis=1)))
    return cond, log_cond, F, D


def blahut_arimoto(
    spec: DiscreteIndirectSpec,
    lam: float,
    q_init=None,
    max_iter: int = 10000,
    tol: float = 1e-14,
) -> BAResult:
    """Alternate ``P(y|x) ∝ Q(y) exp(-lam d)`` and ``Q(y) = sum_x P(x) P(y|x)``.

    The objective tracked is ``-E log E_Q exp(-lam d)``, which equals the
    Lagrangian ``I + lam D`` at the optimal channel for the current ``Q``
    and never increases from one iteration to the next.
    """
    if lam < 0:
        raise ConfigurationError("lambda must be nonnegative")
    ny = spec.d_bar.shape[1]
    q = np.full(ny, 1.0 / ny) if q_init is None else np.asarray(q_init, dtype=np.float64)
    if q.shape != (ny,) or np.any(q <= 0):
        raise ConfigurationError("initial Q_Y must be strictly positive")
    q = q / q.sum()
    floor = 1e-300
    history = []
    cond, log_cond, F, D = _ba_quantities(spec, lam, np.log(np.maximum(q, floor)))
    history.append(F)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        q = np.maximum(spec.p_x @ cond, floor)
        q /= q.sum()
        cond, log_cond, F_new, D = _ba_quantities(spec, lam, np.log(q))
        if F_new > F + 1e-12 * max(1.0, abs(F)):
            raise ArithmeticError(f"Blahut-Arimoto objective increased: {F} -> {F_new}")
        history.append(F_new)
        done = abs(F - F_new) < tol
        F = F_new
        if done:
            converged = True
            break
    if not converged:
        log.warning("Blahut-Arimoto hit max_iter=%d at lambda=%g", max_iter, lam)
    # rate = sum_x p(x) KL(P(.|x) || Q)
    log_q = np.log(np.maximum(spec.p_x @ cond, floor))
    terms = np.where(cond > 0, cond * (log_cond - log_q[None, :]), 0.0)
    R = float(max(np.dot(spec.p_x, terms.sum(axis=1)), 0.0))
    return BAResult(R, D, q, F, it, converged, history)


def ba_curve(spec: DiscreteIndirectSpec, lams, **kw) -> list[BAResult]:
    return [blahut_arimoto(spec, lam, **kw) for lam in lams]


def ba_rate_at_distortion(spec: DiscreteIndirectSpec, D: float, lam_hi: float = 1e4, rtol: float = 1e-10, **kw) -> float:
    """Rate at distortion ``D``, found by bisecting on the slope in log space.

    Distortion falls as the slope grows, so the bracket ``[lo, hi]`` keeps
    ``D(lo) > D >= D(hi)``; the answer is interpolated between the two
    final tangent points.
    """
    lo, hi = 1e-9, lam_hi
    lo_res, hi_res = blahut_arimoto(spec, lo, **kw), blahut_arimoto(spec, hi, **kw)
    if lo_res.distortion <= D:
        return lo_res.rate if lo_res.distortion >= D - 1e-15 else 0.0
    if hi_res.distortion > D:
        raise InfeasibleError(f"D={D} is below the minimum reachable distortion {hi_res.distortion}")
    while hi / lo > 1 + rtol:
        mid = math.sqrt(lo * hi)
        res = blahut_arimoto(spec, mid, **kw)
        if res.distortion > D:
            lo, lo_res = mid, res
        else:
            hi, hi_res = mid, res
    gap = lo_res.distortion - hi_res.distortion
    if gap <= 0:
        return hi_res.rate
    w = (D - hi_res.distortion) / gap
    return float((1 - w) * hi_res.rate + w * lo_res.rate)


def bsc_indirect_spec(p: float) -> DiscreteIndirectSpec:
    """Uniform binary source seen through a binary symmetric channel with crossover ``p``."""
    d = np.array([[p, 1 - p], [1 - p, p]])
    return DiscreteIndirectSpec(np.array([0.5, 0.5]), d)


def bsc_indirect_closed_form(p: float, D) -> np.ndarray | float:
    """``1 - h2((D - p) / (1 - 2p))`` bits for ``p <= D <= 1/2``; zero above 1/2."""
    D = np.asarray(D, dtype=np.float64)
    u = np.clip((D - p) / (1 - 2 * p), 0.0, 0.5)
    out = np.where(D >= 0.5, 0.0, 1.0 - h2(u))
    out = np.where(D < p, np.inf, out)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# binary classification model on a grid
# --------------------------------------------------------------------------


@dataclass
class BinaryGridOracle:
    A: float
    sigma: float
    edges: np.ndarray
    spec: DiscreteIndirectSpec

    @property
    def bayes_error(self) -> float:
        return float(np.dot(self.spec.p_x, self.spec.d_bar.min(axis=1)))

    def rate_bits(self, D: float) -> float:
        return ba_rate_at_distortion(self.spec, D) / LN2

    def curve_bits(self, D_grid) -> np.ndarray:
        return np.array([self.rate_bits(d) for d in np.atleast_1d(D_grid)])


def binary_grid_spec(A: float, sigma: float, bins: int = 1024, span: float = 6.0) -> BinaryGridOracle:
    """Quantise ``X`` into ``bins`` cells over ``±(A + span sigma)``.

    Cell masses use Gaussian CDF differences (outer cells absorb the tails);
    each cell's reduced Hamming loss is the posterior error averaged over the
    cell, computed with the exact conditional masses.
    """
    if sigma <= 0:
        raise ConfigurationError("sigma must be positive")
    if bins < 256:
        raise ConfigurationError("use at least 256 bins")
    lim = abs(A) + span * sigma
    edges = np.linspace(-lim, lim, bins + 1)
    ext = edges.copy()
    ext[0], ext[-1] = -np.inf, np.inf
    m0 = np.diff(norm.cdf(ext, loc=A, scale=sigma))   # P(X in cell | S=0)
    m1 = np.diff(norm.cdf(ext, loc=-A, scale=sigma))  # P(X in cell | S=1)
    p_x = 0.5 * (m0 + m1)
    keep = p_x > 0
    m0, m1, p_x = m0[keep], m1[keep], p_x[keep]
    post0 = m0 / (m0 + m1)
    # column y: probability the label differs from y
    d_bar = np.stack([1.0 - post0, post0], axis=1)
    spec = DiscreteIndirectSpec(p_x / p_x.sum(), d_bar)
    return BinaryGridOracle(A, sigma, edges, spec)


def binary_bayes_error(A: float, sigma: float) -> float:
    """``E[min(p0(X), 1 - p0(X))]``, which equals ``Phi(-A / sigma)``."""
    return float(norm.cdf(-abs(A) / sigma))


def binary_classification_irdf(A: float, sigma: float, D_grid, bins: int = 1024) -> np.ndarray:
    """Indirect rate in bits at each ``D`` for the binary classification model."""
    return binary_grid_spec(A, sigma, bins).curve_bits(D_grid)


# --------------------------------------------------------------------------
# closed forms and bounds
# --------------------------------------------------------------------------


def hamming_rdf_closed_form(H_S: float, alphabet_size: int, D) -> np.ndarray | float:
    """``H(S) - D log2(K - 1) - h2(D)`` bits on ``[0, (K-1)/K]``, zero beyond; clipped at 0."""
    D = np.asarray(D, dtype=np.float64)
    if np.any(D < 0):
        raise ConfigurationError("D must be nonnegative")
    K = alphabet_size
    val = H_S - D * math.log2(K - 1) - h2(np.minimum(D, 1.0)) if K > 2 else H_S - h2(np.minimum(D, 1.0))
    out = np.where(D <= (K - 1) / K, np.maximum(val, 0.0), 0.0)
    return float(out) if out.ndim == 0 else out


def ib_linear_bound(H_S: float, D) -> np.ndarray | float:
    """``max(H(S) - D, 0)``, in whatever unit ``H_S`` and ``D`` share."""
    D = np.asarray(D, dtype=np.float64)
    out = np.maximum(H_S - D, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass
class BoundReport:
    violations: list[tuple[float, float, float]]  # (D, R, bound)
    tolerance: float

    @property
    def ok(self) -> bool:
        return not self.violations


def dpi_lower_bound_check(points, bound, tolerance: float = 0.05) -> BoundReport:
    """Flag every ``(D, R)`` with ``R < bound(D) - tolerance``.

    ``bound`` is a callable ``D -> R`` or a pair of arrays ``(D_grid, R_grid)``
    interpolated linearly.
    """
    if not callable(bound):
        grid_D, grid_R = (np.asarray(a, dtype=np.float64) for a in bound)
        bound_fn = lambda d: float(np.interp(d, grid_D, grid_R))
    else:
        bound_fn = bound
    bad = []
    for D, R in points:
        b = float(bound_fn(D))
        if R < b - tolerance:
            bad.append((float(D), float(R), b))
    return BoundReport(bad, tolerance)
