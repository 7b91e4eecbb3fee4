"""Non-stationary reward environments and ground-truth regret accounting.

Rounds are indexed ``0 .. T-1``.  An environment materializes its full
``T x N`` reward schedule and one noise draw per round before any
interaction, so the learner cannot influence either.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError
from .kernels import RBF, ActionSet, cholesky_feature_map, gram

logger = logging.getLogger(__name__)

__all__ = [
    "Environment",
    "RegretTrace",
    "gp_switching_env",
    "cosine_env",
    "regret_of",
    "make_env",
    "ENV_PRESETS",
    "SLOW_PHASE_KNOTS",
]

REWARD_SCALE = 0.8
NOISE_SD = 0.1


@dataclass(frozen=True, eq=False)
class Environment:
    """A fixed reward schedule over a finite action set.

    Attributes
    ----------
    actions : ActionSet
    rewards : ndarray, shape (T, N)
        Noiseless reward of every action at every round.
    noise : ndarray, shape (T,)
        Noise added to the observed reward at each round.
    name : str
    """

    actions: ActionSet
    rewards: np.ndarray = field(repr=False)
    noise: np.ndarray = field(repr=False)
    name: str = "custom"

    def __post_init__(self):
        r = np.array(self.rewards, dtype=float)
        e = np.array(self.noise, dtype=float).ravel()
        if r.ndim != 2 or r.shape[1] != self.actions.N:
            raise InputError(f"rewards must have shape (T, {self.actions.N}), got {r.shape}")
        if e.size != r.shape[0]:
            raise InputError(f"noise has {e.size} rounds but rewards have {r.shape[0]}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(e))):
            raise InputError("rewards and noise must be finite")
        r.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "noise", e)
        best = r.max(axis=1)
        best.setflags(write=False)
        object.__setattr__(self, "best", best)

    @property
    def T(self) -> int:
        return self.rewards.shape[0]

    @property
    def N(self) -> int:
        return self.rewards.shape[1]

    def observe(self, t: int, x: int) -> tuple[float, bool]:
        """Noisy reward at round ``t`` for action ``x``, clamped to ``[-1, 1]``.

        The flag reports whether clamping changed the value.
        """
        y = self.rewards[t, x] + self.noise[t]
        if y > 1.0:
            return 1.0, True
        if y < -1.0:
            return -1.0, True
        return float(y), False

    @property
    def num_changes(self) -> int:
        """``L_T``: one plus the number of rounds whose reward vector differs from the previous one."""
        return 1 + int(np.count_nonzero(np.any(np.diff(self.rewards, axis=0) != 0, axis=1)))

    @property
    def total_variation(self) -> float:
        """``V_T``: sum over rounds of the sup-norm change in the reward vector."""
        if self.T < 2:
            return 0.0
        return float(np.abs(np.diff(self.rewards, axis=0)).max(axis=1).sum())


@dataclass
class RegretTrace:
    """Per-round record of a run.

    Annotation arrays (``epoch``, ``block``, ``strategy_index``) hold -1
    where they do not apply.
    """

    actions: np.ndarray
    rewards: np.ndarray
    inst_regret: np.ndarray
    epoch: np.ndarray = None
    block: np.ndarray = None
    strategy_index: np.ndarray = None
    restart_flag: np.ndarray = None
    clamp_count: int = 0

    def __post_init__(self):
        n = len(self.actions)
        for name in ("epoch", "block", "strategy_index"):
            if getattr(self, name) is None:
                setattr(self, name, np.full(n, -1, dtype=int))
        if self.restart_flag is None:
            self.restart_flag = np.zeros(n, dtype=int)

    @property
    def cum_regret(self) -> np.ndarray:
        return np.cumsum(self.inst_regret)

    @property
    def final_regret(self) -> float:
        return float(self.inst_regret.sum())

    @property
    def restarts(self) -> int:
        return int(np.sum(self.restart_flag))

    def __len__(self):
        return len(self.actions)


def regret_of(actions: Sequence[int], env: Environment, rewards=None, **annotations) -> RegretTrace:
    """Dynamic regret of an action sequence against the per-round best action.

    Uses the noiseless schedule.  ``rewards`` are the observed rewards, if
    known; otherwise the noiseless rewards are recorded.
    """
    a = np.asarray(actions, dtype=int).ravel()
    if a.size > env.T:
        raise InputError(f"{a.size} actions exceed the horizon {env.T}")
    t = np.arange(a.size)
    got = env.rewards[t, a]
    inst = env.best[: a.size] - got
    obs = got.copy() if rewards is None else np.asarray(rewards, dtype=float)
    return RegretTrace(actions=a, rewards=obs, inst_regret=inst, **annotations)


def _gp_segment(K_chol, rng, scale):
    r = K_chol @ rng.standard_normal(K_chol.shape[0])
    top = np.abs(r).max()
    if top == 0:
        return r
    return r * (scale / top)


def gp_switching_env(d: int, N: int, T: int, rng, switches: Sequence[int] = (),
                     lengthscale: float = 0.2, scale: float = REWARD_SCALE,
                     noise_sd: float = NOISE_SD, flip: bool = False,
                     min_flip_gap: float = 0.0, name: str = "gp-switching") -> Environment:
    """Piecewise-constant GP rewards on random unit-sphere actions.

    Each segment between switches gets an independent draw from
    ``N(0, K)`` with an RBF Gram matrix, rescaled so its largest absolute
    reward is ``scale``.  Round ``t`` uses the segment of the last switch
    ``s <= t``.

    Parameters
    ----------
    switches : sequence of int
        Strictly increasing switch rounds in ``[1, T-1]``.
    flip : bool
        Instead of fresh draws, every later segment negates the previous
        one, so the best action becomes the worst.
    min_flip_gap : float
        With ``flip``, redraw the first segment until ``max r - min r`` is
        at least this value.
    """
    sw = [int(s) for s in switches]
    if any(b <= a for a, b in zip(sw, sw[1:])) or any(s < 1 or s >= T for s in sw):
        raise InputError(f"switches must be strictly increasing within [1, {T - 1}], got {sw}")
    if T < 1 or N < 1 or d < 1:
        raise InputError("T, N and d must be positive")
    actions = ActionSet.unit_sphere(N, d, rng)
    L = cholesky_feature_map(gram(RBF(lengthscale), actions)).features
    segments = []
    for k in range(len(sw) + 1):
        if flip and k > 0:
            segments.append(-segments[-1])
            continue
        for _ in range(1000):
            r = _gp_segment(L, rng, scale)
            if not flip or r.max() - r.min() >= min_flip_gap:
                break
        else:
            raise InputError(f"could not draw a reward vector with range >= {min_flip_gap}")
        segments.append(r)
    seg_of_t = np.searchsorted(np.asarray(sw, dtype=int), np.arange(T), side="right")
    rewards = np.stack(segments)[seg_of_t]
    noise = noise_sd * rng.standard_normal(T)
    return Environment(actions, rewards, noise, name=name)


#: Phase knots ``(fraction of T, phase)`` of the slowly drifting cosine environment.
SLOW_PHASE_KNOTS = ((0.0, 0.0), (0.1, 0.0), (0.3, math.pi), (0.4, math.pi),
                    (0.6, 2 * math.pi), (1.0, 2 * math.pi))


def cosine_env(d: int, N: int, T: int, rng, phase_knots=((0.0, 0.0), (1.0, 0.0)),
               knots_as_fractions: bool = True, amplitude: float = REWARD_SCALE,
               frequency: float = 3.0, noise_sd: float = NOISE_SD,
               name: str = "cosine") -> Environment:
    """Rewards ``amplitude * cos(frequency * x^T theta + phase(t))``.

    ``phase`` interpolates linearly between ``phase_knots``, given as
    ``(time, phase)`` pairs.  Times are fractions of ``T`` unless
    ``knots_as_fractions`` is False.
    """
    if T < 1 or N < 1 or d < 1:
        raise InputError("T, N and d must be positive")
    knots = np.asarray(phase_knots, dtype=float)
    if knots.ndim != 2 or knots.shape[1] != 2 or np.any(np.diff(knots[:, 0]) < 0):
        raise InputError("phase_knots must be (time, phase) pairs with non-decreasing times")
    actions = ActionSet.unit_sphere(N, d, rng)
    theta = rng.standard_normal(d)
    theta /= np.linalg.norm(theta)
    times = knots[:, 0] * (T if knots_as_fractions else 1.0)
    phase = np.interp(np.arange(T), times, knots[:, 1])
    rewards = amplitude * np.cos(frequency * (actions.actions @ theta)[None, :] + phase[:, None])
    noise = noise_sd * rng.standard_normal(T)
    return Environment(actions, rewards, noise, name=name)


def _env1(T, N, d, rng, **kw):
    kw.setdefault("switches", (int(round(0.3 * T)),))
    return gp_switching_env(d, N, T, rng, name="env1-single-switch", **kw)


def _env2(T, N, d, rng, **kw):
    kw.setdefault("switches", (int(round(0.15 * T)), int(round(0.5 * T))))
    return gp_switching_env(d, N, T, rng, name="env2-two-switches", **kw)


def _gp_stationary(T, N, d, rng, **kw):
    return gp_switching_env(d, N, T, rng, switches=(), name="gp-stationary", **kw)


def _gp_flip(T, N, d, rng, **kw):
    kw.setdefault("switches", (T // 2,))
    kw.setdefault("min_flip_gap", 1.0)
    return gp_switching_env(d, N, T, rng, flip=True, name="gp-flip", **kw)


def _cos_stationary(T, N, d, rng, **kw):
    return cosine_env(d, N, T, rng, name="cosine-stationary", **kw)


def _cos_slow(T, N, d, rng, **kw):
    kw.setdefault("phase_knots", SLOW_PHASE_KNOTS)
    return cosine_env(d, N, T, rng, name="cosine-slow", **kw)


ENV_PRESETS = {
    "env1-single-switch": _env1,
    "env2-two-switches": _env2,
    "gp-stationary": _gp_stationary,
    "gp-flip": _gp_flip,
    "cosine-stationary": _cos_stationary,
    "cosine-slow": _cos_slow,
}


def make_env(name: str, T: int, N: int, d: int, rng, **overrides) -> Environment:
    """Build a named preset.  Switch times default to fixed fractions of ``T``."""
    try:
        factory = ENV_PRESETS[name]
    except KeyError:
        raise InputError(f"unknown environment {name!r}; choose from {sorted(ENV_PRESETS)}") from None
    return factory(T, N, d, rng, **overrides)
