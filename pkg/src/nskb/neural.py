"""Fully connected ReLU networks, gradient descent training and gradient feature maps.

The network is ``f(x; W) = sqrt(m) * W_L . relu(W_{L-1} relu(... relu(W_1 x)))``
with ``W_1`` of shape ``(m, d)``, hidden ``W_l`` of shape ``(m, m)`` and the
output vector ``W_L`` of length ``m``.  Parameters are flattened in layer
order, each matrix row-major.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .adaopkb import run_blocks
from .design import info_gain
from .errors import InputError, TrainingDivergedError
from .kernels import ActionSet, FeatureMap, cholesky_feature_map

logger = logging.getLogger(__name__)

__all__ = [
    "MLP",
    "init_mlp",
    "nn_forward",
    "nn_gradient",
    "gradient_gram",
    "gradient_feature_map",
    "TrainResult",
    "train_nn",
    "NeuralMaps",
    "opnn_run",
    "ada_opnn_run",
]


@dataclass(frozen=True, eq=False)
class MLP:
    """Weights of a depth-``L`` ReLU network of width ``m``."""

    weights: tuple = field(repr=False)

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=float) for w in self.weights)
        if len(ws) < 2:
            raise InputError("a network needs at least two layers")
        m = ws[0].shape[0]
        if ws[-1].shape != (m,) or any(w.shape != (m, m) for w in ws[1:-1]):
            raise InputError("layer shapes must be (m, d), (m, m) ... (m, m), (m,)")
        for w in ws:
            w.setflags(write=False)
        object.__setattr__(self, "weights", ws)

    @property
    def m(self) -> int:
        return self.weights[0].shape[0]

    @property
    def d(self) -> int:
        return self.weights[0].shape[1]

    @property
    def L(self) -> int:
        return len(self.weights)

    @property
    def num_params(self) -> int:
        return sum(w.size for w in self.weights)

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights])

    def from_flat(self, theta) -> "MLP":
        out, i = [], 0
        for w in self.weights:
            out.append(np.asarray(theta[i:i + w.size]).reshape(w.shape))
            i += w.size
        return MLP(tuple(out))


def init_mlp(d: int, m: int, L: int, rng) -> MLP:
    """Independent ``N(0, 2/m)`` entries in every layer."""
    if d < 1 or m < 1 or L < 2:
        raise InputError(f"need d >= 1, m >= 1, L >= 2, got d={d}, m={m}, L={L}")
    sd = math.sqrt(2.0 / m)
    ws = [sd * rng.standard_normal((m, d))]
    ws += [sd * rng.standard_normal((m, m)) for _ in range(L - 2)]
    ws.append(sd * rng.standard_normal(m))
    return MLP(tuple(ws))


def _forward(net: MLP, X):
    """Hidden activations ``H_0 = X, H_1, ..., H_{L-1}`` and pre-activations, batched over rows."""
    H = [X]
    Z = []
    for W in net.weights[:-1]:
        z = H[-1] @ W.T
        Z.append(z)
        H.append(np.maximum(z, 0.0))
    f = math.sqrt(net.m) * (H[-1] @ net.weights[-1])
    return f, H, Z


def _deltas(net: MLP, Z, out):
    """Backpropagated sensitivities per hidden layer for output weights ``out`` (one per row)."""
    sm = math.sqrt(net.m)
    D = [None] * len(Z)
    D[-1] = (sm * out[:, None] * net.weights[-1][None, :]) * (Z[-1] > 0)
    for l in range(len(Z) - 2, -1, -1):
        D[l] = (D[l + 1] @ net.weights[l + 1]) * (Z[l] > 0)
    return D


def nn_forward(net: MLP, x) -> np.ndarray | float:
    """Network output for one input vector or a batch of row vectors."""
    X = np.asarray(x, dtype=float)
    f, _, _ = _forward(net, np.atleast_2d(X))
    return float(f[0]) if X.ndim == 1 else f


def nn_gradient(net: MLP, x) -> np.ndarray:
    """Flat gradient of ``f(x; W)`` with respect to all weights (``relu'(0) = 0``)."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if X.shape != (1, net.d):
        raise InputError(f"x must have {net.d} entries")
    _, H, Z = _forward(net, X)
    D = _deltas(net, Z, np.ones(1))
    parts = [np.outer(D[l][0], H[l][0]).ravel() for l in range(len(D))]
    parts.append(math.sqrt(net.m) * H[-1][0])
    return np.concatenate(parts)


def gradient_gram(net: MLP, X) -> np.ndarray:
    """``<g(x_i), g(x_j)> / m`` for the rows of ``X``.

    Each layer's gradient is an outer product ``delta h^T``, so its inner
    products factor as ``(D D^T) * (H H^T)`` and no gradient vector of
    length ``p`` is ever formed.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _, H, Z = _forward(net, X)
    D = _deltas(net, Z, np.ones(X.shape[0]))
    G = net.m * (H[-1] @ H[-1].T)
    for l in range(len(D)):
        G += (D[l] @ D[l].T) * (H[l] @ H[l].T)
    G /= net.m
    return 0.5 * (G + G.T)


def gradient_feature_map(net: MLP, actions, jitter: float = 1e-10) -> FeatureMap:
    """Cholesky feature map of the scaled gradient Gram matrix."""
    X = actions.actions if isinstance(actions, ActionSet) else np.asarray(actions, dtype=float)
    return cholesky_feature_map(gradient_gram(net, X), jitter=jitter, source="neural-gradient")


@dataclass
class TrainResult:
    net: MLP
    losses: np.ndarray


def _aggregate(X, y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise InputError(f"{X.shape[0]} inputs but {y.size} targets")
    if y.size == 0:
        return np.zeros((0, X.shape[1])), np.zeros(0), np.zeros(0), 0.0
    Xu, inv = np.unique(X, axis=0, return_inverse=True)
    inv = inv.ravel()
    n = np.bincount(inv, minlength=Xu.shape[0]).astype(float)
    s = np.bincount(inv, weights=y, minlength=Xu.shape[0])
    return Xu, n, s, float(y @ y)


def _train(net0: MLP, Xu, n, s, yy, lam, eta, J):
    m = net0.m
    w0 = [w.copy() for w in net0.weights]
    ws = [w.copy() for w in net0.weights]
    losses = np.empty(J + 1)
    sm = math.sqrt(m)
    # overflow is expected once training diverges; the loss check reports it
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(J + 1):
            net = MLP(tuple(ws))
            if Xu.shape[0]:
                f, H, Z = _forward(net, Xu)
                fit = 0.5 * (n @ (f * f)) - s @ f + 0.5 * yy
                r = n * f - s
            else:
                fit, r = 0.0, None
            reg = 0.5 * m * lam * sum(float(np.sum((a - b) ** 2)) for a, b in zip(ws, w0))
            loss = fit + reg
            losses[step] = loss
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} at step {step}", step=step, losses=losses[: step + 1])
            if step == J:
                break
            grads = [m * lam * (a - b) for a, b in zip(ws, w0)]
            if r is not None:
                D = _deltas(net, Z, r)
                for l in range(len(D)):
                    grads[l] += D[l].T @ H[l]
                grads[-1] += sm * (H[-1].T @ r)
            for a, g in zip(ws, grads):
                a -= eta * g
    return TrainResult(MLP(tuple(ws)), losses)


def train_nn(net0: MLP, X, y, lam: float, eta: float, J: int) -> TrainResult:
    """Full-batch gradient descent on ``sum (f(x_t) - y_t)^2 / 2 + m lam |W - W0|^2 / 2``.

    Starts from ``net0`` and takes ``J`` steps of size ``eta``.  Repeated
    inputs are aggregated, which leaves the loss and its gradient unchanged.
    ``losses[i]`` is the loss before step ``i``; the last entry is the final loss.
    """
    if not (eta > 0 and lam > 0) or J < 0:
        raise InputError(f"need eta > 0, lam > 0, J >= 0; got {eta}, {lam}, {J}")
    Xu, n, s, yy = _aggregate(X, y)
    return _train(net0, Xu, n, s, yy, lam, eta, int(J))


class NeuralMaps:
    """Feature maps from a network retrained before every block.

    Block 0 of every epoch uses the gradients of the initial network.
    Before block ``j >= 1`` the network is retrained from its initial
    weights on the epoch's history and the map is rebuilt.  With ``J = 0``
    training is a no-op, so the initial map is reused.
    """

    def __init__(self, actions, net0: MLP, T: int, sigma: float, lam: float, eta: float, J: int,
                 reward_scale: float = 1.0, tol: float = 1e-6, jitter: float = 1e-10):
        self.X = actions.actions if isinstance(actions, ActionSet) else np.asarray(actions, dtype=float)
        self.net0 = net0
        self.T, self.sigma, self.tol, self.jitter = T, sigma, tol, jitter
        self.lam, self.eta, self.J = lam, eta, int(J)
        self.reward_scale = reward_scale
        self.phi0 = gradient_feature_map(net0, self.X, jitter=jitter)
        self.gain0 = info_gain(self.phi0, T, sigma, tol=tol)
        self.losses = []

    def initial(self):
        return self.phi0, self.gain0

    def for_block(self, j, actions, rewards):
        if self.J == 0 or len(actions) == 0:
            return self.phi0, self.gain0
        N = self.X.shape[0]
        n = np.bincount(actions, minlength=N).astype(float)
        y = self.reward_scale * np.asarray(rewards, dtype=float)
        s = np.bincount(actions, weights=y, minlength=N)
        keep = n > 0
        res = _train(self.net0, self.X[keep], n[keep], s[keep], float(y @ y), self.lam, self.eta, self.J)
        self.losses.append(res.losses)
        phi = gradient_feature_map(res.net, self.X, jitter=self.jitter)
        return phi, info_gain(phi, self.T, self.sigma, tol=self.tol)


def opnn_run(env, maps: NeuralMaps, params, rng):
    """OPKB with the feature map rebuilt from a retrained network before each block.

    ``params.gamma`` should be the information gain of the initial map.
    """
    return run_blocks(env, maps, params, rng, adaptive=False)


def ada_opnn_run(env, maps: NeuralMaps, params, rng, sched_rng=None):
    """ADA-OPKB with retrained gradient feature maps."""
    return run_blocks(env, maps, params, rng, sched_rng=sched_rng, adaptive=True)
