"""Local GP prediction state: predictive mean/variance and variance reduction.

A :class:`LocalState` tracks one prediction location ``x`` and its growing
sub-design ``X_j``.  Adding the point ``u`` lowers the predictive variance by
``sigma^2 * R(u)`` with

    R(u) = (Phi(x,u) - Phi(u,X_j) A^{-1} Phi(X_j,x))^2
           / (1 - Phi(u,X_j) A^{-1} Phi(X_j,u)),      A = Phi(X_j,X_j),

``R`` is evaluated through the Cholesky factor ``A = L L'`` that the growing
inverse carries: with ``z_t = L^{-1} Phi(X_j,t)``,

    R(u) = (Phi(x,u) - z_u'z_x)^2 / (1 - z_u'z_u),

which costs the same O(j^2) per candidate but keeps the small denominators
accurate when ``A`` is poorly conditioned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernel import KernelSpec
from .linalg import (DEFAULT_DEFLATION, DEFAULT_MAX_ITERS, DEFAULT_TOL,
                     GrowableSPDInverse, backward_solve,
                     forward_solve, min_eigenvalue)

INELIGIBLE_DEN = 1e-12
NEGATIVE_VARIANCE_TOL = 1e-10


class NumericalBreakdown(ArithmeticError):
    """Variance or likelihood computations lost all precision."""


class IneligibleCandidate(ValueError):
    """The candidate is numerically a duplicate of the current sub-design."""


class EmptySubDesign(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """Full design ``X_N`` (N x d) and responses ``Y_N``."""

    inputs: np.ndarray
    responses: np.ndarray

    def __post_init__(self):
        x = np.array(self.inputs, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("inputs must be a non-empty N x d matrix")
        y = np.array(self.responses, dtype=float).reshape(-1)
        if y.shape[0] != x.shape[0]:
            raise ValueError(f"{y.shape[0]} responses for {x.shape[0]} inputs")
        if not np.all(np.isfinite(x)):
            raise ValueError("inputs must be finite")
        if not np.all(np.isfinite(y)):
            raise ValueError("responses must be finite")
        if np.unique(x, axis=0).shape[0] != x.shape[0]:
            raise ValueError("duplicate design rows are not allowed")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "responses", y)

    @classmethod
    def without_responses(cls, inputs) -> "Dataset":
        inputs = np.asarray(inputs, dtype=float)
        return cls(inputs, np.zeros(inputs.shape[0]))

    @property
    def n_rows(self) -> int:
        return self.inputs.shape[0]

    @property
    def dims(self) -> int:
        return self.inputs.shape[1]


@dataclass
class EigenParams:
    tol: float = DEFAULT_TOL
    max_iters: int = DEFAULT_MAX_ITERS
    seed: int = 0
    deflation: float = DEFAULT_DEFLATION


@dataclass(eq=False)
class LocalState:
    """Per-location greedy search state.  Single owner; never shared."""

    spec: KernelSpec
    location: np.ndarray
    scaled_location: np.ndarray
    chosen: list[int] = field(default_factory=list)
    chosen_scaled: np.ndarray = None
    inv: GrowableSPDInverse = field(default_factory=GrowableSPDInverse)
    cross: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kweights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    zx: np.ndarray = field(default_factory=lambda: np.zeros(0))
    variance: float = 0.0
    ineligible: set[int] = field(default_factory=set)
    eigen: EigenParams = field(default_factory=EigenParams)
    _lambda_cache: tuple[int, float] | None = None

    @classmethod
    def start(cls, spec: KernelSpec, x, eigen: EigenParams | None = None) -> "LocalState":
        x = np.asarray(x, dtype=float).reshape(-1)
        xs = spec.scale_points(x)
        return cls(spec=spec, location=x, scaled_location=xs,
                   chosen_scaled=np.zeros((0, spec.dims)), variance=spec.scale,
                   eigen=eigen or EigenParams())

    @property
    def order(self) -> int:
        return len(self.chosen)

    @property
    def lambda_min(self) -> float:
        """Lower estimate of the smallest eigenvalue of ``Phi(X_j, X_j)`` (cached per order)."""
        j = self.order
        if j == 0:
            return math.inf
        if self._lambda_cache is None or self._lambda_cache[0] != j:
            e = self.eigen
            lam = min_eigenvalue(self.inv, e.tol, e.max_iters, e.seed + j, e.deflation)
            self._lambda_cache = (j, lam)
        return self._lambda_cache[1]

    def kweights_norm(self) -> float:
        return float(np.linalg.norm(self.kweights))


def candidate_terms(state: LocalState, cand_scaled: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``Phi(x, u)`` and ``Phi(u, X_j)`` for a block of Theta-scaled candidates."""
    cand_scaled = np.atleast_2d(cand_scaled)
    spec = state.spec
    kxu = spec.cross_scaled(cand_scaled, state.scaled_location[None, :])[:, 0]
    kux = spec.cross_scaled(cand_scaled, state.chosen_scaled)
    return kxu, kux


def reduction_terms(state: LocalState, kxu: np.ndarray, kux: np.ndarray):
    """Numerators and denominators of ``R`` for a candidate block.

    Sums run in a fixed order over the sub-design columns, so each row's
    result depends only on that row's inputs: the same candidate gets
    bit-identical ``R`` whichever block it is scored in.
    """
    j = state.order
    if j == 0:
        return kxu * kxu, np.ones_like(kxu)
    z = forward_solve(state.inv.factor, kux)
    fit = np.zeros(kux.shape[0])
    quad = np.zeros(kux.shape[0])
    for a in range(j):
        fit += z[a] * state.zx[a]
        quad += z[a] * z[a]
    resid = kxu - fit
    return resid * resid, 1.0 - quad


def variance_reductions(state: LocalState, kxu: np.ndarray, kux: np.ndarray) -> np.ndarray:
    """Vector of ``R`` values; ineligible candidates come back as ``nan``."""
    num, den = reduction_terms(state, kxu, kux)
    out = np.full(num.shape, np.nan)
    ok = den > INELIGIBLE_DEN
    out[ok] = num[ok] / den[ok]
    return out


def variance_reduction(state: LocalState, candidate) -> float:
    """``R(u)`` for a single raw-coordinate candidate point.

    Raises :class:`IneligibleCandidate` when the conditional variance of the
    candidate given ``X_j`` is numerically zero.
    """
    u = state.spec.scale_points(np.asarray(candidate, dtype=float).reshape(1, -1))
    kxu, kux = candidate_terms(state, u)
    r = variance_reductions(state, kxu, kux)[0]
    if np.isnan(r):
        raise IneligibleCandidate("candidate duplicates the sub-design in correlation space")
    return float(r)


def accept(state: LocalState, index: int, scaled_point: np.ndarray,
           kxu: float | None = None, kux: np.ndarray | None = None,
           reduction: float | None = None) -> LocalState:
    """Append dataset row ``index`` to the sub-design, updating all caches in place."""
    if index in state.chosen:
        raise ValueError(f"index {index} is already in the sub-design")
    spec = state.spec
    scaled_point = np.asarray(scaled_point, dtype=float).reshape(-1)
    if kxu is None or kux is None:
        kxu_a, kux_a = candidate_terms(state, scaled_point[None, :])
        kxu, kux = float(kxu_a[0]), kux_a[0]
    if reduction is None:
        num, den = reduction_terms(state, np.array([kxu]), np.atleast_2d(kux))
        if not den[0] > INELIGIBLE_DEN:
            raise IneligibleCandidate(f"index {index} has conditional variance {den[0]:.3e}")
        reduction = float(num[0] / den[0])
    kux = np.asarray(kux, dtype=float).reshape(-1)
    j = state.order
    state.inv.extend(kux, 1.0)
    lc = state.inv.factor[j, :j]
    state.zx = np.append(state.zx, (kxu - float(lc @ state.zx)) / state.inv.factor[j, j])
    state.chosen.append(int(index))
    state.chosen_scaled = np.vstack([state.chosen_scaled, scaled_point[None, :]])
    state.cross = np.append(state.cross, kxu)
    state.kweights = backward_solve(state.inv.factor, state.zx)
    v = state.variance - spec.scale * reduction
    if v < -NEGATIVE_VARIANCE_TOL * spec.scale:
        raise NumericalBreakdown(f"variance fell to {v:.3e} at order {state.order}")
    state.variance = max(v, 0.0)
    return state


def predictive_variance(state: LocalState) -> float:
    """``sigma^2 (1 - Phi(x,X_j) A^{-1} Phi(X_j,x))`` from the cached weights."""
    if state.order == 0:
        raise EmptySubDesign("predictive variance needs at least one design point")
    v = state.spec.scale * (1.0 - float(state.cross @ state.kweights))
    if v < -NEGATIVE_VARIANCE_TOL * state.spec.scale:
        raise NumericalBreakdown(f"predictive variance {v:.3e}")
    return max(v, 0.0)


def predictive_mean(state: LocalState, data: Dataset, mean: float = 0.0) -> float:
    """Kriging predictor with zero (``mean=0``) or constant mean."""
    if state.order == 0:
        raise EmptySubDesign("predictive mean needs at least one design point")
    y = data.responses[state.chosen] - mean
    return float(mean + state.kweights @ y)


def dense_variance(spec: KernelSpec, sub_design, x, nugget: float = 0.0) -> float:
    """Predictive variance from a fresh dense solve.

    ``nugget`` is added to the diagonal of the sub-design correlation matrix
    only; it is a reporting option and never used during search.
    """
    sub = np.atleast_2d(np.asarray(sub_design, dtype=float))
    k = spec.cross(sub, sub) + nugget * np.eye(sub.shape[0])
    kx = spec.cross(sub, np.asarray(x, dtype=float).reshape(1, -1))[:, 0]
    return spec.scale * (1.0 - float(kx @ np.linalg.solve(k, kx)))


def _golden_max(f, lo: float, hi: float, tol: float) -> float:
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def profile_loglik(spec: KernelSpec, points: np.ndarray, resid: np.ndarray, factor: float) -> float:
    """Profile log-likelihood (sigma^2 concentrated out) with lengthscales scaled by ``factor``."""
    j = points.shape[0]
    k = spec.inflated(factor).cross(points, points)
    try:
        chol = np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        return -math.inf
    z = np.linalg.solve(chol, resid)
    s2 = float(z @ z) / j
    if not s2 > 0:
        return -math.inf
    logdet = 2.0 * float(np.log(np.diag(chol)).sum())
    return -0.5 * (j * math.log(s2) + logdet)


def local_scale_mle(state: LocalState, data: Dataset, mean: float = 0.0,
                    bracket: tuple[float, float] = (0.1, 10.0),
                    tol: float = 1e-5) -> tuple[float, float]:
    """Local estimates ``(sigma2_hat, g_hat)`` on the selected sub-design.

    ``g_hat`` multiplies every lengthscale and maximises the profile
    likelihood by golden-section search on ``log g`` over ``bracket``;
    ``sigma2_hat`` is then the closed-form ``r' A_g^{-1} r / j`` at ``g_hat``.
    A residual vector of exact zeros gives ``(0.0, 1.0)``.
    """
    j = state.order
    if j < 3:
        raise ValueError("local MLE needs at least three design points")
    pts = data.inputs[state.chosen]
    resid = data.responses[state.chosen] - mean
    if not np.any(resid):
        return 0.0, 1.0
    spec = state.spec

    def f(logg):
        return profile_loglik(spec, pts, resid, math.exp(logg))

    logg = _golden_max(f, math.log(bracket[0]), math.log(bracket[1]), tol / bracket[1])
    g = math.exp(logg)
    if not math.isfinite(f(logg)):
        raise NumericalBreakdown("local likelihood is not finite over the bracket")
    k = spec.inflated(g).cross(pts, pts)
    s2 = float(resid @ np.linalg.solve(k, resid)) / j
    return s2, g
