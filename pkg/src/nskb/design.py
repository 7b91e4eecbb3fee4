"""Design matrices, maximum information gain, optimal designs and the OP solver.

Every optimization here has the form

    maximize   w * log det S(P, lam) - c . P     over distributions P on a support A

with ``S(P, lam) = sum_x P(x) phi(x) phi(x)^T + lam I``.  It is concave in
``P`` and its gradient in coordinate ``x`` is ``w * |phi(x)|^2_{S^-1} - c_x``.
We solve it with pairwise Frank-Wolfe: each step moves mass from the worst
supported action to the best action in ``A``.  The hat matrix
``G = Phi S^-1 Phi^T`` is kept current with rank-two Woodbury updates, so a
step costs ``O(|A|^2)``, and the Frank-Wolfe gap certifies the distance to
the optimum.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import InputError, ShapeError
from .kernels import FeatureMap

logger = logging.getLogger(__name__)

__all__ = [
    "Strategy",
    "DesignMatrix",
    "design_matrix",
    "SolverResult",
    "InfoGain",
    "OPSolution",
    "maximize_logdet",
    "info_gain",
    "solve_design",
    "optimal_design",
    "op_solve",
]

MAX_ITER = 5000
REFRESH_EVERY = 50


def _features(phi) -> np.ndarray:
    if isinstance(phi, FeatureMap):
        return phi.features
    F = np.atleast_2d(np.asarray(phi, dtype=float))
    if not np.all(np.isfinite(F)):
        raise InputError("feature map contains non-finite entries")
    return F


@dataclass(frozen=True, eq=False)
class Strategy:
    """A probability distribution over ``N`` actions."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).ravel()
        if w.size == 0 or not np.all(np.isfinite(w)):
            raise InputError("strategy weights must be finite and non-empty")
        if np.any(w < 0):
            raise InputError(f"strategy weights must be non-negative, min is {w.min():.3g}")
        if abs(w.sum() - 1.0) > 1e-9:
            raise InputError(f"strategy weights sum to {w.sum():.12g}, not 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def N(self) -> int:
        return self.weights.size

    @classmethod
    def uniform(cls, n: int, support=None) -> "Strategy":
        """Uniform on ``support`` (all actions by default)."""
        w = np.zeros(n)
        idx = np.arange(n) if support is None else np.asarray(support, dtype=int)
        if idx.size == 0:
            raise InputError("support is empty")
        w[idx] = 1.0 / idx.size
        return cls(w)

    @classmethod
    def point_mass(cls, n: int, i: int) -> "Strategy":
        w = np.zeros(n)
        w[i] = 1.0
        return cls(w)

    def mix(self, other: "Strategy", weight: float) -> "Strategy":
        """Return ``(1 - weight) * self + weight * other``."""
        if self.N != other.N:
            raise ShapeError(f"cannot mix strategies over {self.N} and {other.N} actions")
        return Strategy((1.0 - weight) * self.weights + weight * other.weights)

    def sample(self, rng, size=None):
        """Draw action indices by inverse-CDF sampling."""
        cdf = np.cumsum(self.weights)
        u = rng.random(size) * cdf[-1]
        return np.minimum(np.searchsorted(cdf, u, side="right"), self.N - 1)


def _as_weights(P, n):
    w = P.weights if isinstance(P, Strategy) else np.asarray(P, dtype=float).ravel()
    if w.size != n:
        raise ShapeError(f"strategy has {w.size} weights but the feature map has {n} rows")
    if not np.all(np.isfinite(w)):
        raise InputError("strategy weights contain non-finite entries")
    return w


class DesignMatrix:
    """``S = sum_x P(x) phi(x) phi(x)^T + lam I`` with a cached Cholesky factor.

    Parameters
    ----------
    phi : FeatureMap or ndarray
        Row ``i`` is the feature vector of action ``i``.
    P : Strategy or array_like
        Weights per action; they need not sum to one.
    lam : float
        Ridge term, must be positive.
    """

    def __init__(self, phi, P, lam: float):
        F = _features(phi)
        w = _as_weights(P, F.shape[0])
        if not (np.isfinite(lam) and lam > 0):
            raise InputError(f"lam must be positive, got {lam}")
        self.F = F
        self.weights = w
        self.lam = float(lam)
        self.S = (F.T * w) @ F + lam * np.eye(F.shape[1])
        self._L = np.linalg.cholesky(self.S)
        self.logdet = 2.0 * float(np.sum(np.log(np.diag(self._L))))
        self._variances = None
        self._columns = {}

    def solve(self, v) -> np.ndarray:
        """Return ``S^-1 v``."""
        return sla.cho_solve((self._L, True), np.asarray(v, dtype=float))

    def variances(self) -> np.ndarray:
        """``|phi(x)|^2_{S^-1}`` for every action ``x``."""
        if self._variances is None:
            Z = sla.solve_triangular(self._L, self.F.T, lower=True)
            self._variances = np.einsum("ij,ij->j", Z, Z)
            self._variances.setflags(write=False)
        return self._variances

    def quad(self, x: int, y: int | None = None) -> float:
        """``phi(x)^T S^-1 phi(y)`` (``y`` defaults to ``x``)."""
        y = x if y is None else y
        return float(self.F[x] @ self.solve(self.F[y]))

    def ips_column(self, x: int) -> np.ndarray:
        """``Phi S^-1 phi(x)``: the IPS estimate vector per unit reward at ``x``.

        Cached per action so repeated calls return the same array.
        """
        col = self._columns.get(x)
        if col is None:
            col = self.F @ self.solve(self.F[x])
            col.setflags(write=False)
            self._columns[x] = col
        return col


def design_matrix(phi, P, lam: float) -> DesignMatrix:
    """Build ``S_phi(P, lam)`` with its factorization and log-determinant cached."""
    return DesignMatrix(phi, P, lam)


@dataclass
class SolverResult:
    """Output of :func:`maximize_logdet`."""

    weights: np.ndarray
    objective: float
    logdet: float
    gap: float
    iterations: int
    converged: bool
    history: np.ndarray = field(repr=False)
    leverage: np.ndarray = field(repr=False)


def _hat(FA, w, lam):
    S = (FA.T * w) @ FA + lam * np.eye(FA.shape[1])
    L = np.linalg.cholesky(S)
    Z = sla.solve_triangular(L, FA.T, lower=True)
    return Z.T @ Z, 2.0 * float(np.sum(np.log(np.diag(L))))


def _line_search(w, dc, gss, gvv, gsv, upper):
    """Maximize ``w log q(t) - t dc`` over ``t`` in ``[0, upper]``.

    ``q(t) = 1 + b t + a t^2`` is the determinant ratio of a pairwise move;
    the objective is concave, so bisection on the derivative suffices.
    """
    b = gss - gvv
    a = gsv * gsv - gss * gvv

    def deriv(t):
        q = 1.0 + t * (b + a * t)
        return w * (b + 2.0 * a * t) / q - dc

    if deriv(upper) >= 0.0:
        return upper
    lo, hi = 0.0, upper
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if deriv(mid) > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * upper:
            break
    return 0.5 * (lo + hi)


def maximize_logdet(phi, lam, *, w=1.0, cost=None, support=None, gap_tol=1e-9,
                    max_iter=MAX_ITER, init=None) -> SolverResult:
    """Maximize ``w log det S(P, lam) - cost . P`` over distributions on ``support``.

    Parameters
    ----------
    phi : FeatureMap or ndarray
        Features, one row per action.
    lam : float
        Positive ridge term.
    w : float
        Weight of the log-determinant.
    cost : array_like, optional
        Linear cost per action (zero by default).
    support : array_like of int, optional
        Allowed actions; all actions by default.
    gap_tol : float
        Stop once the Frank-Wolfe duality gap is at most this value.
    max_iter : int
        Iteration cap; ``converged`` is False if it is reached.
    init : array_like, optional
        Starting weights on the support; uniform by default.

    Returns
    -------
    SolverResult
        ``weights`` has length ``N`` with zeros off the support. ``leverage``
        holds ``|phi(x)|^2_{S^-1}`` at the solution for every action.
    """
    F = _features(phi)
    n = F.shape[0]
    if not (np.isfinite(lam) and lam > 0):
        raise InputError(f"lam must be positive, got {lam}")
    if not (np.isfinite(w) and w > 0):
        raise InputError(f"w must be positive, got {w}")
    c_full = np.zeros(n) if cost is None else np.asarray(cost, dtype=float).ravel()
    if c_full.size != n or not np.all(np.isfinite(c_full)):
        raise InputError("cost must be a finite vector with one entry per action")
    A = np.arange(n) if support is None else np.unique(np.asarray(support, dtype=int))
    if A.size == 0:
        raise InputError("support is empty")
    if A[0] < 0 or A[-1] >= n:
        raise InputError("support indices out of range")

    FA = F[A]
    c = c_full[A]
    k = A.size
    if init is None:
        p = np.full(k, 1.0 / k)
    else:
        p = np.asarray(init, dtype=float).ravel().copy()
        if p.size == n:
            p = p[A]
        if p.size != k or np.any(p < 0) or p.sum() <= 0:
            raise InputError("init must be non-negative weights on the support")
        p /= p.sum()

    G, logdet = _hat(FA, p, lam)
    obj = w * logdet - c @ p
    history = [obj]
    gap = math.inf
    it = 0
    converged = False
    since_refresh = 0
    while True:
        grad = w * np.diag(G) - c
        gap = float(grad.max() - p @ grad)
        if gap <= gap_tol:
            converged = True
            break
        if it >= max_iter or k == 1:
            converged = k == 1
            break
        s = int(np.argmax(grad))
        active = np.flatnonzero(p > 0)
        v = int(active[np.argmin(grad[active])])
        if s == v or grad[s] - grad[v] <= 0:
            converged = True
            break
        gss, gvv, gsv = G[s, s], G[v, v], G[s, v]
        step = _line_search(w, c[s] - c[v], gss, gvv, gsv, p[v])
        if step <= 0:
            converged = True
            break
        q = 1.0 + step * (gss - gvv) + step * step * (gsv * gsv - gss * gvv)
        M = np.array([[1.0 / step + gss, gsv], [gsv, -1.0 / step + gvv]])
        cols = G[:, [s, v]]
        G = G - cols @ np.linalg.solve(M, cols.T)
        if step >= p[v]:
            p[s] += p[v]
            p[v] = 0.0
        else:
            p[s] += step
            p[v] -= step
        logdet += math.log(q)
        it += 1
        since_refresh += 1
        if since_refresh >= REFRESH_EVERY:
            G, logdet = _hat(FA, p, lam)
            since_refresh = 0
        history.append(w * logdet - c @ p)

    if since_refresh:
        G, logdet = _hat(FA, p, lam)
        grad = w * np.diag(G) - c
        gap = float(grad.max() - p @ grad)
    p = np.maximum(p, 0.0)
    p /= p.sum()
    weights = np.zeros(n)
    weights[A] = p
    dm = DesignMatrix(F, weights, lam)
    if not converged:
        logger.warning("log-det solver hit %d iterations with gap %.3g", max_iter, gap)
    return SolverResult(
        weights=weights,
        objective=w * dm.logdet - c_full @ weights,
        logdet=dm.logdet,
        gap=max(gap, 0.0),
        iterations=it,
        converged=converged,
        history=np.asarray(history),
        leverage=np.array(dm.variances()),
    )


@dataclass
class InfoGain:
    """Maximum information gain and the distribution attaining it.

    ``gamma`` is a certified lower bound; the true maximum is at most
    ``gamma + gap``.  Unpacks as ``gamma, strategy``.
    """

    gamma: float
    strategy: Strategy
    gap: float
    iterations: int
    converged: bool

    def __iter__(self):
        yield self.gamma
        yield self.strategy


def _check_horizon(T, sigma):
    if not (T >= 1):
        raise InputError(f"T must be at least 1, got {T}")
    if not (np.isfinite(sigma) and sigma > 0):
        raise InputError(f"sigma must be positive, got {sigma}")


def solve_design(phi, support, sigma: float, T: int, tol: float = 1e-6,
                 max_iter: int = MAX_ITER) -> SolverResult:
    """Maximize ``log det S(P, sigma/T)`` over distributions on ``support``.

    The stopping gap is ``tol`` times the current information-gain value
    (at least 1), so ``tol`` is relative.
    """
    _check_horizon(T, sigma)
    F = _features(phi)
    offset = F.shape[1] * math.log(T / sigma)
    # the information-gain value is at least log det of the uniform design
    lam = sigma / T
    A = np.arange(F.shape[0]) if support is None else np.asarray(support, dtype=int)
    if A.size == 0:
        raise InputError("support is empty")
    w0 = np.zeros(F.shape[0])
    w0[np.unique(A)] = 1.0 / np.unique(A).size
    scale = max(DesignMatrix(F, w0, lam).logdet + offset, 1.0)
    return maximize_logdet(F, lam, support=A, gap_tol=tol * scale, max_iter=max_iter)


def info_gain(phi, T: int, sigma: float, tol: float = 1e-6,
              max_iter: int = MAX_ITER) -> InfoGain:
    """Maximum information gain ``max_P log det S(T P / sigma, 1)``.

    Computed as ``max_P log det S(P, sigma/T) + D log(T/sigma)`` where ``D``
    is the feature dimension.
    """
    F = _features(phi)
    res = solve_design(F, None, sigma, T, tol=tol, max_iter=max_iter)
    gamma = res.logdet + F.shape[1] * math.log(T / sigma)
    return InfoGain(gamma, Strategy(res.weights), res.gap, res.iterations, res.converged)


def optimal_design(phi, A, sigma: float, T: int, tol: float = 1e-6,
                   max_iter: int = MAX_ITER) -> Strategy:
    """The distribution on ``A`` maximizing ``log det S(P, sigma/T)``."""
    return Strategy(solve_design(phi, A, sigma, T, tol=tol, max_iter=max_iter).weights)


@dataclass
class OPSolution:
    """Result of :func:`op_solve`.

    The ``eps*`` fields are slack budgets for the three guarantees on ``Q``,
    derived from the solver gaps:

    * ``sum Q gaps <= (1 + alpha) gamma / beta + eps_regret``
    * ``|phi(x)|^2_{S(Q)^-1} <= beta gaps(x) + 2 gamma + eps_variance``
    * ``|phi(x)|^2_{S(Q)^-1} <= beta^2 gaps(x)^2 / (2 alpha gamma) + 2 gamma + eps_variance_sq``
    """

    Q: Strategy
    Pstar: Strategy
    A: np.ndarray
    gamma: float
    objective: float
    gap: float
    design_gap: float
    gamma_gap: float
    iterations: int
    converged: bool
    eps_regret: float
    eps_variance: float
    eps_variance_sq: float


def op_solve(phi, gaps, alpha: float, beta: float, T: int, sigma: float,
             tol: float = 1e-6, gamma: InfoGain | float | None = None,
             max_iter: int = MAX_ITER) -> OPSolution:
    """Trade empirical gaps against a log-det exploration bonus.

    Finds ``P*`` maximizing ``(2/beta) log det S(P, sigma/T) - sum_x P(x) gaps(x)``,
    takes ``A = {x : gaps(x) <= 2 alpha gamma / beta}`` and returns
    ``Q = P*/2 + pi(A)/2`` where ``pi(A)`` is the optimal design on ``A``.

    Parameters
    ----------
    phi : FeatureMap or ndarray
    gaps : array_like
        Non-negative empirical gaps, one per action.
    alpha, beta : float
        Positive constants.
    T : int
        Horizon.
    sigma : float
        Regularization scale; the ridge term is ``sigma / T``.
    tol : float
        Relative solver tolerance.
    gamma : InfoGain or float, optional
        Precomputed information gain; computed here if omitted.
    """
    F = _features(phi)
    n = F.shape[0]
    _check_horizon(T, sigma)
    d = np.asarray(gaps, dtype=float).ravel()
    if d.size != n:
        raise ShapeError(f"gaps has {d.size} entries but the feature map has {n} rows")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise InputError("gaps must be finite and non-negative")
    if not (alpha > 0 and beta > 0):
        raise InputError(f"alpha and beta must be positive, got {alpha}, {beta}")
    if gamma is None:
        gamma = info_gain(F, T, sigma, tol=tol, max_iter=max_iter)
    if isinstance(gamma, InfoGain):
        g, g_gap = gamma.gamma, gamma.gap
    else:
        g, g_gap = float(gamma), 0.0

    lam = sigma / T
    wt = 2.0 / beta
    res = maximize_logdet(F, lam, w=wt, cost=d, gap_tol=tol * wt * max(g, 1.0), max_iter=max_iter)
    A = np.flatnonzero(d <= 2.0 * alpha * g / beta)
    des = solve_design(F, A, sigma, T, tol=tol, max_iter=max_iter)
    Q = 0.5 * res.weights + 0.5 * des.weights
    eps2 = beta * res.gap + 2.0 * g_gap
    return OPSolution(
        Q=Strategy(Q / Q.sum()),
        Pstar=Strategy(res.weights),
        A=A,
        gamma=g,
        objective=res.objective,
        gap=res.gap,
        design_gap=des.gap,
        gamma_gap=g_gap,
        iterations=res.iterations + des.iterations,
        converged=res.converged and des.converged,
        eps_regret=0.5 * res.gap + g_gap / beta,
        eps_variance=eps2,
        eps_variance_sq=max(2.0 * g_gap + 2.0 * des.gap, eps2),
    )
