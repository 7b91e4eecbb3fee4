"""GP-UCB with optional sliding window or periodic restarts.

The posterior is computed in feature space.  With ``n`` the per-action
observation counts and ``s`` the per-action reward sums over the active
window,

    W = Phi^T diag(n) Phi + lam I,   mu = Phi W^-1 Phi^T s,   var = lam diag(Phi W^-1 Phi^T),

which equals the kernel-form posterior over the individual observations.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .design import _features, info_gain
from .envs import Environment, RegretTrace, regret_of
from .errors import InputError
from .estimation import argmax_lowest

logger = logging.getLogger(__name__)

__all__ = [
    "GPPosterior",
    "gp_posterior_update",
    "GPUCBParams",
    "gamma_schedule",
    "ucb_beta",
    "gpucb_step",
    "gpucb_run",
]

TIE_TOL = 1e-12


class GPPosterior:
    """Posterior over a finite action set from per-action counts and reward sums.

    Parameters
    ----------
    phi : FeatureMap or ndarray
    lam : float
        Positive regularizer.
    counts, sums : array_like, optional
        Observation counts and reward sums per action (zero by default).
    """

    def __init__(self, phi, lam: float, counts=None, sums=None):
        if not (np.isfinite(lam) and lam > 0):
            raise InputError(f"lam must be positive, got {lam}")
        self.F = _features(phi)
        n = self.F.shape[0]
        self.lam = float(lam)
        self.counts = np.zeros(n) if counts is None else np.asarray(counts, dtype=float)
        self.sums = np.zeros(n) if sums is None else np.asarray(sums, dtype=float)
        if self.counts.shape != (n,) or self.sums.shape != (n,):
            raise InputError("counts and sums need one entry per action")
        W = (self.F.T * self.counts) @ self.F + self.lam * np.eye(self.F.shape[1])
        L = np.linalg.cholesky(W)
        Z = sla.solve_triangular(L, self.F.T, lower=True)
        hat = Z.T @ Z
        self.mean = hat @ self.sums
        self.variance = np.maximum(self.lam * np.diag(hat), 0.0)

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(self.variance)

    @classmethod
    def from_history(cls, phi, lam, actions, rewards) -> "GPPosterior":
        F = _features(phi)
        a = np.asarray(actions, dtype=int)
        n = np.bincount(a, minlength=F.shape[0]).astype(float)
        s = np.bincount(a, weights=np.asarray(rewards, dtype=float), minlength=F.shape[0])
        return cls(F, lam, n, s)


def gp_posterior_update(state: GPPosterior, x: int, y: float) -> GPPosterior:
    """Posterior after one more observation ``y`` at action ``x``."""
    n = state.counts.copy()
    s = state.sums.copy()
    n[x] += 1.0
    s[x] += y
    return GPPosterior(state.F, state.lam, n, s)


@dataclass(frozen=True)
class GPUCBParams:
    """Settings of GP-UCB.

    ``v`` scales the confidence width (1 recovers the untuned rule).
    ``window`` keeps only the most recent observations; ``restart_every``
    discards the history every that many rounds.
    """

    lam: float = 1.0
    v: float = 1.0
    delta: float = 0.05
    window: int | None = None
    restart_every: int | None = None
    exact_gamma: bool = False

    def __post_init__(self):
        if not (self.lam > 0 and self.v > 0 and 0 < self.delta < 1):
            raise InputError("need lam > 0, v > 0 and 0 < delta < 1")
        if self.window is not None and self.window < 1:
            raise InputError(f"window must be positive, got {self.window}")
        if self.restart_every is not None and self.restart_every < 1:
            raise InputError(f"restart_every must be positive, got {self.restart_every}")


def gamma_schedule(phi, T: int, lam: float, exact: bool = False, tol: float = 1e-4) -> np.ndarray:
    """``gamma[t]`` is the information gain at horizon ``t`` with noise ``lam``, for ``t = 0 .. T``.

    ``gamma[0] = 0``.  Unless ``exact``, it is evaluated at powers of two and
    interpolated linearly in ``log t``, with values carried through a
    running maximum so the schedule never decreases.
    """
    F = _features(phi)
    out = np.zeros(T + 1)
    if T < 1:
        return out
    if exact:
        pts = np.arange(1, T + 1)
    else:
        pts = sorted({2**k for k in range(int(math.ceil(math.log2(max(T, 1)))) + 1)} | {T})
        pts = np.asarray([p for p in pts if p <= T])
    vals = np.array([info_gain(F, int(p), lam, tol=tol).gamma for p in pts])
    vals = np.maximum.accumulate(vals)
    ts = np.arange(1, T + 1)
    out[1:] = np.interp(np.log(ts), np.log(pts), vals) if pts.size > 1 else vals[0]
    return out


def ucb_beta(gamma_prev: float, delta: float) -> float:
    """``1 + sqrt(2 (gamma_{t-1} + 1 + log(1/delta)))``."""
    return 1.0 + math.sqrt(2.0 * (gamma_prev + 1.0 + math.log(1.0 / delta)))


def gpucb_step(state: GPPosterior, beta: float, v: float = 1.0) -> int:
    """Action maximizing ``mu + v beta sd``, lowest index among near-ties."""
    return argmax_lowest(state.mean + v * beta * state.sd, atol=TIE_TOL)


def gpucb_run(env: Environment, phi, params: GPUCBParams, T: int | None = None,
              gammas: np.ndarray | None = None) -> RegretTrace:
    """Run GP-UCB (optionally windowed) against ``env``.  The policy is deterministic."""
    T = env.T if T is None else min(T, env.T)
    F = _features(phi)
    if F.shape[0] != env.N:
        raise InputError(f"feature map has {F.shape[0]} rows but the environment has {env.N} actions")
    if gammas is None:
        gammas = gamma_schedule(F, T, params.lam, exact=params.exact_gamma)
    N = env.N
    actions = np.zeros(T, dtype=int)
    rewards = np.zeros(T)
    clamps = 0
    restart_flag = np.zeros(T, dtype=int)
    origin = 0
    for t in range(T):
        if params.restart_every is not None and t > 0 and t % params.restart_every == 0:
            origin = t
            restart_flag[t] = 1
        lo = origin if params.window is None else max(origin, t - params.window)
        a = actions[lo:t]
        n = np.bincount(a, minlength=N).astype(float)
        s = np.bincount(a, weights=rewards[lo:t], minlength=N)
        post = GPPosterior(F, params.lam, n, s)
        beta = ucb_beta(gammas[t], params.delta)
        x = gpucb_step(post, beta, params.v)
        y, clamped = env.observe(t, x)
        clamps += clamped
        actions[t], rewards[t] = x, y
    trace = regret_of(actions, env, rewards=rewards, restart_flag=restart_flag)
    trace.clamp_count = clamps
    return trace
