"""Inverse-propensity reward estimates, interval averages and empirical gaps."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .design import DesignMatrix, Strategy, _features
from .errors import InputError

logger = logging.getLogger(__name__)

__all__ = [
    "RoundRecord",
    "RewardEstimates",
    "GapEstimates",
    "DesignCache",
    "clamp_reward",
    "ips_estimate_round",
    "interval_estimates",
    "gap_estimates",
    "argmax_lowest",
]


@dataclass(frozen=True)
class RoundRecord:
    """One interaction: the strategy used, the action drawn and the reward seen."""

    t: int
    action_index: int
    reward: float
    strategy_index: int
    strategy: Strategy

    def __post_init__(self):
        if not abs(self.reward) <= 1.0:
            raise InputError(f"reward {self.reward} outside [-1, 1]")


@dataclass(frozen=True)
class RewardEstimates:
    """Average IPS estimate per action over the closed interval ``[s, e]``."""

    interval: tuple
    values: np.ndarray


@dataclass(frozen=True)
class GapEstimates:
    """Empirical suboptimality gaps over the closed interval ``[s, e]``."""

    interval: tuple
    gaps: np.ndarray


def clamp_reward(y: float) -> tuple[float, bool]:
    """Clamp ``y`` into ``[-1, 1]``; the flag reports whether it moved."""
    if y > 1.0:
        return 1.0, True
    if y < -1.0:
        return -1.0, True
    return float(y), False


class DesignCache:
    """``S_phi(P, sigma/T)`` factorizations keyed by strategy object.

    A strategy is only ever paired with one feature map inside a cache, so
    the key is the strategy's identity.
    """

    def __init__(self, phi, sigma: float, T: int):
        self.F = _features(phi)
        self.lam = sigma / T
        self._store = {}

    def get(self, P: Strategy) -> DesignMatrix:
        dm = self._store.get(id(P))
        if dm is None or dm[0] is not P:
            dm = (P, DesignMatrix(self.F, P, self.lam))
            self._store[id(P)] = dm
        return dm[1]

    def estimate(self, P: Strategy, x: int, y: float) -> np.ndarray:
        """Per-action IPS estimate after observing ``y`` at action ``x`` under ``P``."""
        return self.get(P).ips_column(x) * y

    def clear(self):
        self._store.clear()


def ips_estimate_round(phi, P_t: Strategy, x_t: int, y_t: float, sigma: float, T: int,
                       cache: DesignCache | None = None) -> np.ndarray:
    """``phi(x)^T S_phi(P_t, sigma/T)^-1 phi(x_t) y_t`` for every action ``x``."""
    if not abs(y_t) <= 1.0:
        raise InputError(f"reward {y_t} outside [-1, 1]")
    if cache is None:
        cache = DesignCache(phi, sigma, T)
    return cache.estimate(P_t, int(x_t), float(y_t))


def interval_estimates(records: Sequence[RoundRecord], phi, sigma: float, T: int,
                       cache: DesignCache | None = None) -> RewardEstimates:
    """Mean of the per-round IPS estimates over ``records``."""
    if len(records) == 0:
        raise InputError("interval is empty")
    if cache is None:
        cache = DesignCache(phi, sigma, T)
    rows = np.stack([cache.estimate(r.strategy, r.action_index, r.reward) for r in records])
    return RewardEstimates((records[0].t, records[-1].t), rows.mean(axis=0))


def gap_estimates(R: RewardEstimates) -> GapEstimates:
    """``max_x' R(x') - R(x)``; the maximizers get exactly zero."""
    v = np.asarray(R.values, dtype=float)
    if not np.all(np.isfinite(v)):
        raise InputError("reward estimates contain non-finite values")
    return GapEstimates(R.interval, v.max() - v)


def argmax_lowest(values, atol: float = 0.0) -> int:
    """Index of the maximum, taking the lowest index among values within ``atol`` of it."""
    v = np.asarray(values)
    return int(np.flatnonzero(v >= v.max() - atol)[0])
