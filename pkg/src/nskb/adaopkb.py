"""Block-doubling kernel bandit with replayed strategies and restart tests.

OPKB plays in blocks of doubling length ``2^j E``.  Block 0 plays the
optimal design; before block ``j >= 1`` it solves the OP problem on the
empirical gaps of all earlier rounds and mixes the result with the design.
ADA-OPKB additionally replays older block strategies on randomly scheduled
intervals and restarts from block 0 when the gaps seen on a replay interval
disagree with the gaps of an earlier cumulative block.

Rounds are indexed from 0.  Intervals are closed, ``(start, end)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .design import DesignMatrix, InfoGain, Strategy, info_gain, op_solve
from .envs import Environment, RegretTrace
from .errors import InputError
from .kernels import FeatureMap

logger = logging.getLogger(__name__)

__all__ = [
    "AlgoParams",
    "ReplayInterval",
    "RestartCause",
    "Epoch",
    "RunResult",
    "StaticMaps",
    "schedule",
    "covering_index",
    "restart_test",
    "test_statistic",
    "opkb_run",
    "ada_opkb_run",
    "run_blocks",
]

INTERVAL_EXCEEDS = "interval-exceeds-history"
HISTORY_EXCEEDS = "history-exceeds-interval"


@dataclass(frozen=True)
class AlgoParams:
    """Constants of the block algorithms.

    ``gamma`` is the maximum information gain of the feature map used to
    derive ``beta_j`` and ``E``.  Use :meth:`theory` for the constants under
    which the regret analysis holds and :meth:`tuned` for free constants.
    """

    T: int
    N: int
    gamma: float
    sigma: float = 1.0
    delta: float = 0.05
    c0: float = 1.0
    c1: float = 0.5
    c2: float = 1.0
    c3: float = 1.0
    c4: float = 0.25
    mode: str = "tuned"
    solver_tol: float = 1e-6

    def __post_init__(self):
        if self.T < 2 or self.N < 1:
            raise InputError(f"need T >= 2 and N >= 1, got T={self.T}, N={self.N}")
        if not (self.gamma > 0 and self.sigma > 0):
            raise InputError("gamma and sigma must be positive")
        if not 0 < self.delta < 1:
            raise InputError(f"delta must lie in (0, 1), got {self.delta}")
        for name in ("c0", "c2", "c3", "c4"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if not 0 < self.c1 < 1:
            raise InputError(f"c1 must lie in (0, 1) so that mu_j does, got {self.c1}")

    @property
    def C0(self) -> float:
        return 8.0 * self.T * math.log2(self.T)

    @property
    def log_term(self) -> float:
        return math.log(self.C0 * self.N / self.delta)

    @property
    def E(self) -> int:
        return max(1, math.ceil(self.c3 * self.gamma * self.log_term))

    @property
    def alpha(self) -> float:
        return self.c4 * self.sigma / self.log_term

    def mu(self, j: int) -> float:
        return self.c1 * 2.0 ** (-j / 2)

    def beta(self, j: int) -> float:
        return self.c2 * self.gamma * 2.0 ** (j / 2)

    def threshold(self, m: int, k: int) -> float:
        """Restart threshold ``4 c0 mu_{min(m, k)}``."""
        return 4.0 * self.c0 * self.mu(min(m, k))

    @classmethod
    def theory(cls, T, N, gamma, sigma=1.0, delta=0.05, **kw) -> "AlgoParams":
        """Constants for which ``c0 * beta_j * mu_j = 2 gamma`` holds."""
        c4 = 0.25
        alpha = c4 * sigma / math.log(8.0 * T * math.log2(T) * N / delta)
        ra = math.sqrt(alpha)
        return cls(T=T, N=N, gamma=gamma, sigma=sigma, delta=delta, c0=40 + 16 * ra,
                   c1=0.5, c2=1.0 / (10 + 4 * ra), c3=4.0, c4=c4, mode="theory", **kw)

    @classmethod
    def tuned(cls, T, N, gamma, sigma=1.0, delta=0.05, **constants) -> "AlgoParams":
        return cls(T=T, N=N, gamma=gamma, sigma=sigma, delta=delta, mode="tuned", **constants)


@dataclass(frozen=True)
class ReplayInterval:
    """Strategy index ``m`` scheduled on rounds ``start .. end`` inclusive."""

    m: int
    start: int
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start + 1


def schedule(t: int, j: int, E: int, rng) -> list[ReplayInterval]:
    """Random replay schedule for a block of length ``2^j E`` starting at ``t``.

    The block's own interval ``(j, [t, t + 2^j E - 1])`` is always present.
    For each ``m < j`` every slot at an offset that is a multiple of
    ``2^m E`` is included independently with probability ``sqrt(2^(m-j))``.
    """
    if j < 0 or E < 1:
        raise InputError(f"need j >= 0 and E >= 1, got j={j}, E={E}")
    out = [ReplayInterval(j, t, t + (2**j) * E - 1)]
    for m in range(j):
        length = (2**m) * E
        hits = np.flatnonzero(rng.random(2 ** (j - m)) < math.sqrt(2.0 ** (m - j)))
        out.extend(ReplayInterval(m, t + int(h) * length, t + (int(h) + 1) * length - 1) for h in hits)
    return out


def covering_index(intervals: Sequence[ReplayInterval], start: int, length: int) -> np.ndarray:
    """Smallest scheduled index covering each round of ``[start, start + length)``."""
    top = max(iv.m for iv in intervals)
    m_t = np.full(length, top, dtype=int)
    for iv in intervals:
        a = max(iv.start - start, 0)
        b = min(iv.end - start + 1, length)
        if b > a:
            np.minimum(m_t[a:b], iv.m, out=m_t[a:b])
    return m_t


@dataclass(frozen=True)
class RestartCause:
    """Why a restart fired: action ``x`` on replay interval ``(m, [start, end])`` against ``C(k)``."""

    t: int
    x: int
    m: int
    k: int
    side: str
    start: int
    end: int
    interval_gap: float
    history_gap: float
    threshold: float


def restart_test(interval_gaps, history_gaps, params: AlgoParams, t: int = -1):
    """Compare replay-interval gaps with cumulative-block gaps.

    Parameters
    ----------
    interval_gaps : sequence of (ReplayInterval, ndarray)
        Gaps of every scheduled interval ending at ``t``.
    history_gaps : sequence of ndarray
        ``history_gaps[k]`` holds the gaps over ``C(k)`` for every ``k < j``.
    params : AlgoParams

    Returns
    -------
    RestartCause or None
        The first violated inequality, scanning intervals, then ``k``, then
        the two sides, then actions in index order.
    """
    for iv, gI in interval_gaps:
        gI = np.asarray(gI)
        for k, gC in enumerate(history_gaps):
            thr = params.threshold(iv.m, k)
            for side, lhs in ((INTERVAL_EXCEEDS, gI - 4.0 * gC), (HISTORY_EXCEEDS, gC - 4.0 * gI)):
                hit = np.flatnonzero(lhs > thr)
                if hit.size:
                    x = int(hit[0])
                    return RestartCause(t, x, iv.m, k, side, iv.start, iv.end,
                                        float(gI[x]), float(gC[x]), thr)
    return None


@dataclass
class Epoch:
    """Rounds ``start .. end`` run without a restart; ``cause`` ends the epoch if set."""

    index: int
    start: int
    end: int = -1
    blocks: list = field(default_factory=list)
    cause: RestartCause | None = None


@dataclass
class RunResult:
    """Trace and bookkeeping of one run.

    ``estimates`` holds the per-round IPS estimate vectors (row ``t`` is
    computed from round ``t`` alone).  ``strategies[t]`` and
    ``maps[t]`` are the strategy and feature map used at round ``t``.
    """

    trace: RegretTrace
    epochs: list
    estimates: np.ndarray = field(repr=False)
    strategies: list = field(repr=False)
    maps: list = field(repr=False)
    E: int = 0
    tests: list = field(default_factory=list, repr=False)

    @property
    def restarts(self) -> list:
        return [e.cause for e in self.epochs if e.cause is not None]


class StaticMaps:
    """One feature map for every block, with its design and information gain computed once."""

    def __init__(self, phi: FeatureMap, T: int, sigma: float, tol: float = 1e-6, gain: InfoGain | None = None):
        self.phi = phi
        self.gain = gain if gain is not None else info_gain(phi, T, sigma, tol=tol)

    def initial(self):
        return self.phi, self.gain

    def for_block(self, j, actions, rewards):
        return self.phi, self.gain


def _interval_gaps(rows):
    v = rows.mean(axis=0)
    return v.max() - v


def test_statistic(interval_gaps, history_gaps):
    """Largest violation of either inequality, over actions, intervals and ``k``.

    Returns ``(value, m, k)`` where ``value`` is the left-hand side divided
    by ``2^(-min(m, k)/2)``; a restart fires when it exceeds ``4 c0 c1``.
    """
    best = (-math.inf, -1, -1)
    for iv, gI in interval_gaps:
        for k, gC in enumerate(history_gaps):
            lhs = max(float(np.max(gI - 4.0 * gC)), float(np.max(gC - 4.0 * gI)))
            val = lhs * 2.0 ** (min(iv.m, k) / 2)
            if val > best[0]:
                best = (val, iv.m, k)
    return best


def run_blocks(env: Environment, maps, params: AlgoParams, rng, sched_rng=None,
               adaptive: bool = True, record_tests: bool = False) -> RunResult:
    """Shared block loop behind OPKB, ADA-OPKB and their neural variants.

    Parameters
    ----------
    env : Environment
    maps : object
        Provides ``initial() -> (phi, InfoGain)`` and
        ``for_block(j, actions, rewards) -> (phi, InfoGain)`` where the
        arguments are the epoch's history before block ``j``.  The design
        on all actions is the maximizer stored in the ``InfoGain``.
    params : AlgoParams
    rng : numpy.random.Generator
        Draws the played actions.
    sched_rng : numpy.random.Generator, optional
        Draws replay schedules; defaults to ``rng``.
    adaptive : bool
        Replay older strategies and test for restarts.
    record_tests : bool
        Store ``(t, value, m, k)`` from :func:`test_statistic` for every
        test in ``RunResult.tests``.
    """
    T = min(params.T, env.T)
    N = env.N
    if N != params.N:
        raise InputError(f"environment has {N} actions but params expect {params.N}")
    sched_rng = rng if sched_rng is None else sched_rng
    lam = params.sigma / params.T
    E = params.E

    actions = np.zeros(T, dtype=int)
    rewards = np.zeros(T)
    est = np.zeros((T, N))
    epoch_a = np.full(T, -1, dtype=int)
    block_a = np.full(T, -1, dtype=int)
    m_a = np.full(T, -1, dtype=int)
    restart_a = np.zeros(T, dtype=int)
    strategies = [None] * T
    maps_used = [None] * T
    clamps = 0
    epochs = []
    tests = []

    t = 0
    while t < T:
        epoch = Epoch(index=len(epochs), start=t)
        epochs.append(epoch)
        ep0 = t
        phi0, gain0 = maps.initial()
        P = [Strategy(gain0.strategy.weights)]
        designs = [DesignMatrix(phi0, P[0], lam)]
        phis = [phi0]
        hist_gaps = []
        j = 0
        restarted = False
        while t < T and not restarted:
            if j >= 1:
                phi_j, gain_j = maps.for_block(j, actions[ep0:t], rewards[ep0:t])
                sol = op_solve(phi_j, hist_gaps[j - 1], params.alpha, params.beta(j), params.T,
                               params.sigma, tol=params.solver_tol, gamma=gain_j)
                Pj = sol.Q.mix(gain_j.strategy, params.mu(j))
                P.append(Pj)
                phis.append(phi_j)
                designs.append(DesignMatrix(phi_j, Pj, lam))
            length = (2**j) * E
            b_end = min(t + length, T)
            if adaptive:
                S = schedule(t, j, E, sched_rng)
            else:
                S = [ReplayInterval(j, t, t + length - 1)]
            m_t = covering_index(S, t, b_end - t)
            ends = {}
            for iv in S:
                if adaptive and iv.end < b_end:
                    ends.setdefault(iv.end, []).append(iv)
            epoch.blocks.append((j, t, b_end - 1))
            cdfs = [np.cumsum(p.weights) for p in P]
            u = rng.random(b_end - t)
            for s in range(t, b_end):
                m = int(m_t[s - t])
                cdf = cdfs[m]
                x = min(int(np.searchsorted(cdf, u[s - t] * cdf[-1], side="right")), N - 1)
                y, clamped = env.observe(s, x)
                clamps += clamped
                actions[s], rewards[s] = x, y
                est[s] = designs[m].ips_column(x) * y
                epoch_a[s], block_a[s], m_a[s] = epoch.index, j, m
                strategies[s], maps_used[s] = P[m], phis[m]
                if s in ends and j >= 1:
                    checks = [(iv, _interval_gaps(est[iv.start:s + 1])) for iv in ends[s]]
                    if record_tests:
                        tests.append((s, *test_statistic(checks, hist_gaps)))
                    cause = restart_test(checks, hist_gaps, params, t=s)
                    if cause is not None:
                        epoch.cause = cause
                        epoch.end = s
                        restart_a[s] = 1
                        restarted = True
                        # the unused uniforms are discarded so the next epoch is reproducible
                        t = s + 1
                        break
            if restarted:
                break
            t = b_end
            epoch.end = t - 1
            hist_gaps.append(_interval_gaps(est[ep0:t]))
            j += 1

    idx = np.arange(T)
    trace = RegretTrace(
        actions=actions,
        rewards=rewards,
        inst_regret=env.best[:T] - env.rewards[idx, actions],
        epoch=epoch_a,
        block=block_a,
        strategy_index=m_a,
        restart_flag=restart_a,
        clamp_count=int(clamps),
    )
    return RunResult(trace, epochs, est, strategies, maps_used, E, tests)


def opkb_run(env: Environment, phi: FeatureMap, params: AlgoParams, rng, gain: InfoGain | None = None) -> RunResult:
    """Blocks of doubling length, each playing a single mixed strategy."""
    maps = StaticMaps(phi, params.T, params.sigma, tol=params.solver_tol, gain=gain)
    return run_blocks(env, maps, params, rng, adaptive=False)


def ada_opkb_run(env: Environment, phi: FeatureMap, params: AlgoParams, rng, sched_rng=None,
                 gain: InfoGain | None = None) -> RunResult:
    """OPKB with replayed strategies and restarts on detected change."""
    maps = StaticMaps(phi, params.T, params.sigma, tol=params.solver_tol, gain=gain)
    return run_blocks(env, maps, params, rng, sched_rng=sched_rng, adaptive=True)
