"""Kernels, Gram matrices and N-dimensional feature maps.

A feature map is stored as an ``N x N`` matrix whose row ``i`` is the
feature vector of action ``i``.  For the Cholesky map, ``K = L L^T`` with
``L`` lower triangular, so row ``i`` of ``L`` is ``L^T e_i`` read as a
vector.  Any two maps with the same Gram matrix are interchangeable for
every quantity the bandit algorithms compute (log-determinants and
quadratic forms of the design matrix).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np
import scipy.linalg as sla

from .errors import FactorizationError, InputError, InvalidKernelError, ShapeError

logger = logging.getLogger(__name__)

__all__ = [
    "ActionSet",
    "Linear",
    "RBF",
    "Matern",
    "NeuralGram",
    "Kernel",
    "FeatureMap",
    "gram",
    "cholesky_feature_map",
    "eigen_feature_map",
    "kernel_feature_map",
    "equivalence_check",
    "kernel_from_dict",
    "JITTER_LADDER",
]

#: Jitter values tried in order before a factorization is declared failed.
JITTER_LADDER = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ActionSet:
    """A finite set of ``N`` actions in ``R^d`` stored row-wise."""

    actions: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.actions, dtype=float))
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise InputError(f"actions must be a non-empty (N, d) array, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InputError("actions contain non-finite entries")
        object.__setattr__(self, "actions", _readonly(a))

    @property
    def N(self) -> int:
        return self.actions.shape[0]

    @property
    def d(self) -> int:
        return self.actions.shape[1]

    def __len__(self):
        return self.N

    @classmethod
    def unit_sphere(cls, n, d, rng) -> "ActionSet":
        """Sample ``n`` actions uniformly on the unit sphere in ``R^d``."""
        z = rng.standard_normal((n, d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        return cls(z)


def _as_array(actions) -> np.ndarray:
    if isinstance(actions, ActionSet):
        return actions.actions
    return ActionSet(actions).actions


@dataclass(frozen=True)
class Linear:
    """``k(x, x') = <x, x'>``."""

    def __call__(self, X, Y):
        return X @ Y.T


@dataclass(frozen=True)
class RBF:
    """Squared-exponential kernel ``exp(-|x - x'|^2 / (2 l^2))``."""

    lengthscale: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.lengthscale) and self.lengthscale > 0):
            raise InvalidKernelError(f"lengthscale must be positive, got {self.lengthscale}")

    def __call__(self, X, Y):
        d2 = _sq_dists(X, Y)
        return np.exp(-0.5 * d2 / self.lengthscale**2)


@dataclass(frozen=True)
class Matern:
    """Matern kernel for half-integer smoothness 1/2, 3/2 or 5/2."""

    nu: float = 2.5
    lengthscale: float = 1.0

    def __post_init__(self):
        if self.nu not in (0.5, 1.5, 2.5):
            raise InvalidKernelError(f"nu must be one of 0.5, 1.5, 2.5, got {self.nu}")
        if not (np.isfinite(self.lengthscale) and self.lengthscale > 0):
            raise InvalidKernelError(f"lengthscale must be positive, got {self.lengthscale}")

    def __call__(self, X, Y):
        r = np.sqrt(_sq_dists(X, Y)) / self.lengthscale
        if self.nu == 0.5:
            return np.exp(-r)
        if self.nu == 1.5:
            s = np.sqrt(3.0) * r
            return (1.0 + s) * np.exp(-s)
        s = np.sqrt(5.0) * r
        return (1.0 + s + s * s / 3.0) * np.exp(-s)


@dataclass(frozen=True, eq=False)
class NeuralGram:
    """A precomputed ``N x N`` Gram matrix, e.g. from network gradients."""

    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "matrix", _readonly(self.matrix))


Kernel = Union[Linear, RBF, Matern, NeuralGram]


def _sq_dists(X, Y):
    d2 = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * X @ Y.T
    return np.maximum(d2, 0.0)


def kernel_from_dict(spec) -> Kernel:
    """Build a kernel from a config mapping such as ``{"type": "rbf", "lengthscale": 0.2}``."""
    spec = dict(spec)
    kind = str(spec.pop("type", "")).lower()
    if kind == "linear":
        if spec:
            raise InvalidKernelError(f"unexpected linear kernel keys: {sorted(spec)}")
        return Linear()
    if kind == "rbf":
        return RBF(**spec)
    if kind == "matern":
        return Matern(**spec)
    raise InvalidKernelError(f"unknown kernel type {kind!r}")


def gram(kernel: Kernel, actions) -> np.ndarray:
    """Return the ``N x N`` Gram matrix ``[k(a_i, a_j)]``.

    Raises ``InvalidKernelError`` for non-finite entries or when a diagonal
    entry exceeds 1 (the kernel must be normalized so ``k(x, x) <= 1``).
    """
    if isinstance(kernel, NeuralGram):
        K = np.array(kernel.matrix)
        n = _as_array(actions).shape[0]
        if K.shape != (n, n):
            raise ShapeError(f"precomputed Gram has shape {K.shape}, expected {(n, n)}")
    else:
        X = _as_array(actions)
        K = kernel(X, X)
    if not np.all(np.isfinite(K)):
        raise InvalidKernelError("kernel produced non-finite entries")
    K = 0.5 * (K + K.T)
    if not isinstance(kernel, NeuralGram) and np.max(np.diag(K)) > 1.0 + 1e-12:
        raise InvalidKernelError(
            f"k(x, x) = {np.max(np.diag(K)):.6g} exceeds 1; normalize the actions"
        )
    return K


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Row ``i`` of ``features`` is the feature vector of action ``i``."""

    features: np.ndarray = field(repr=False)
    source: str = "kernel"
    jitter: float = 0.0

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.features, dtype=float))
        if not np.all(np.isfinite(F)):
            raise InputError("feature map contains non-finite entries")
        object.__setattr__(self, "features", _readonly(F))

    @property
    def N(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def gram(self) -> np.ndarray:
        return self.features @ self.features.T


def cholesky_feature_map(K, jitter: float = 1e-10, source: str = "kernel") -> FeatureMap:
    """Factor ``K + jitter I = L L^T`` and return ``L`` as a feature map.

    The jitter is escalated by factors of 10 up to ``1e-6`` if the
    factorization fails.
    """
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ShapeError(f"K must be square, got shape {K.shape}")
    if not np.all(np.isfinite(K)):
        raise InvalidKernelError("K contains non-finite entries")
    if not np.allclose(K, K.T, rtol=0, atol=1e-10 * max(1.0, np.abs(K).max())):
        raise InputError("K is not symmetric")
    K = 0.5 * (K + K.T)
    n = K.shape[0]
    ladder = [j for j in JITTER_LADDER if j >= jitter] or [jitter]
    if ladder[0] != jitter:
        ladder.insert(0, jitter)
    for jit in ladder:
        try:
            L = np.linalg.cholesky(K + jit * np.eye(n))
        except np.linalg.LinAlgError:
            logger.debug("cholesky failed at jitter %g", jit)
            continue
        if jit != jitter:
            logger.info("cholesky needed jitter %g", jit)
        return FeatureMap(L, source=source, jitter=jit)
    raise FactorizationError(f"matrix is not PSD even with jitter {ladder[-1]:g}")


def eigen_feature_map(K, source: str = "eigen") -> FeatureMap:
    """Feature map ``V diag(sqrt(w))`` from the eigendecomposition of ``K``.

    Negative eigenvalues from round-off are clipped to zero.
    """
    K = np.asarray(K, dtype=float)
    w, V = sla.eigh(0.5 * (K + K.T))
    return FeatureMap(V * np.sqrt(np.clip(w, 0.0, None)), source=source)


def kernel_feature_map(kernel: Kernel, actions, jitter: float = 1e-10) -> FeatureMap:
    """Cholesky feature map of ``kernel`` on ``actions``."""
    return cholesky_feature_map(gram(kernel, actions), jitter=jitter, source=type(kernel).__name__.lower())


def equivalence_check(phi1: FeatureMap, phi2: FeatureMap, tol: float = 1e-8) -> bool:
    """True iff the two maps agree on every pairwise inner product within ``tol``."""
    F1 = phi1.features if isinstance(phi1, FeatureMap) else np.atleast_2d(phi1)
    F2 = phi2.features if isinstance(phi2, FeatureMap) else np.atleast_2d(phi2)
    if F1.shape[0] != F2.shape[0]:
        raise ShapeError(f"feature maps cover {F1.shape[0]} and {F2.shape[0]} actions")
    return bool(np.max(np.abs(F1 @ F1.T - F2 @ F2.T)) <= tol)
