"""Experiment configuration: loading, overriding and validation.

See ``docs/config.md`` for the schema.  Validation happens up front and
rejects unknown keys at every level.
"""
from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..envs import ENV_PRESETS
from ..errors import ConfigError

__all__ = [
    "AlgorithmSpec",
    "ExperimentConfig",
    "ALGORITHMS",
    "load_config",
    "parse_config",
    "apply_overrides",
    "expand_grid",
]

_BLOCK_KEYS = {"mode", "sigma", "delta", "c0", "c1", "c2", "c3", "c4"}
_NET_KEYS = {"m", "L", "eta", "J", "lam", "reward_scale"}
_UCB_KEYS = {"lam", "v", "delta", "window", "restart_every", "exact_gamma"}

#: Allowed parameter names per algorithm id.
ALGORITHMS = {
    "opkb": _BLOCK_KEYS,
    "ada-opkb": _BLOCK_KEYS,
    "opnn": _BLOCK_KEYS | {"network"},
    "ada-opnn": _BLOCK_KEYS | {"network"},
    "gpucb": _UCB_KEYS,
    "sw-gpucb": _UCB_KEYS,
}

_TOP_KEYS = {"name", "T", "N", "d", "seeds", "environment", "kernel", "algorithms",
             "output", "solver", "checkpoints", "write_traces"}
_ENV_KEYS = {"preset", "overrides"}
_KERNEL_KEYS = {"type", "lengthscale", "nu"}
_SOLVER_KEYS = {"tol", "gamma_tol"}
_ALGO_KEYS = {"id", "label", "params", "grid"}


@dataclass
class AlgorithmSpec:
    id: str
    label: str
    params: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    name: str
    T: int
    N: int
    d: int
    seeds: list
    environment: str
    env_overrides: dict
    kernel: dict
    algorithms: list
    output: str
    solver_tol: float = 1e-6
    gamma_tol: float = 1e-4
    checkpoints: int = 10
    write_traces: bool = True

    def to_dict(self) -> dict:
        return {
            "name": self.name, "T": self.T, "N": self.N, "d": self.d, "seeds": list(self.seeds),
            "environment": {"preset": self.environment, "overrides": dict(self.env_overrides)},
            "kernel": dict(self.kernel),
            "algorithms": [{"id": a.id, "label": a.label, "params": a.params, "grid": a.grid}
                           for a in self.algorithms],
            "output": self.output,
            "solver": {"tol": self.solver_tol, "gamma_tol": self.gamma_tol},
            "checkpoints": self.checkpoints, "write_traces": self.write_traces,
        }


def _unknown(d, allowed, where):
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"unknown keys in {where}: {extra}")


def _int(v, where, lo=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where} must be an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"{where} must be at least {lo}, got {v}")
    return v


def _pos(v, where):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
        raise ConfigError(f"{where} must be a positive number, got {v!r}")
    return float(v)


def _seeds(v):
    if isinstance(v, dict):
        _unknown(v, {"start", "count"}, "seeds")
        start = _int(v.get("start", 0), "seeds.start", 0)
        count = _int(v.get("count", 0), "seeds.count", 0)
        v = list(range(start, start + count))
    if not isinstance(v, list):
        raise ConfigError("seeds must be a list or {start, count}")
    if not v:
        raise ConfigError("seed list is empty")
    for s in v:
        _int(s, "seed", 0)
    if len(set(v)) != len(v):
        raise ConfigError("seeds contain duplicates")
    return list(v)


def _check_params(aid, params, where):
    _unknown(params, ALGORITHMS[aid], where)
    for k, v in params.items():
        if k == "mode":
            if v not in ("theory", "tuned"):
                raise ConfigError(f"{where}.mode must be 'theory' or 'tuned'")
        elif k == "network":
            if not isinstance(v, dict):
                raise ConfigError(f"{where}.network must be a mapping")
            _unknown(v, _NET_KEYS, f"{where}.network")
            for nk in ("m", "L"):
                if nk in v:
                    _int(v[nk], f"{where}.network.{nk}", 2 if nk == "L" else 1)
            if "J" in v:
                _int(v["J"], f"{where}.network.J", 0)
            for nk in ("eta", "lam", "reward_scale"):
                if nk in v:
                    _pos(v[nk], f"{where}.network.{nk}")
        elif k in ("window", "restart_every"):
            if v is not None:
                _int(v, f"{where}.{k}", 1)
        elif k == "exact_gamma":
            if not isinstance(v, bool):
                raise ConfigError(f"{where}.exact_gamma must be a boolean")
        elif k == "delta" or k == "c1":
            if not (isinstance(v, (int, float)) and 0 < v < 1):
                raise ConfigError(f"{where}.{k} must lie in (0, 1), got {v!r}")
        else:
            _pos(v, f"{where}.{k}")


def _algorithm(raw, i):
    where = f"algorithms[{i}]"
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping")
    _unknown(raw, _ALGO_KEYS, where)
    aid = raw.get("id")
    if aid not in ALGORITHMS:
        raise ConfigError(f"{where}.id must be one of {sorted(ALGORITHMS)}, got {aid!r}")
    params = dict(raw.get("params") or {})
    _check_params(aid, params, f"{where}.params")
    grid = dict(raw.get("grid") or {})
    for k, vals in grid.items():
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"{where}.grid.{k} must be a non-empty list")
        for v in vals:
            _check_params(aid, _set_path({}, k, v), f"{where}.grid")
    if aid == "sw-gpucb" and "window" not in params and "window" not in grid:
        raise ConfigError(f"{where}: sw-gpucb needs a window")
    return AlgorithmSpec(aid, str(raw.get("label", aid)), params, grid)


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a raw mapping and build an :class:`ExperimentConfig`."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    _unknown(raw, _TOP_KEYS, "config")
    for key in ("T", "N", "d", "seeds", "environment", "algorithms"):
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}")
    T = _int(raw["T"], "T", 2)
    N = _int(raw["N"], "N", 1)
    d = _int(raw["d"], "d", 1)
    env = raw["environment"]
    if isinstance(env, str):
        env = {"preset": env}
    if not isinstance(env, dict):
        raise ConfigError("environment must be a preset name or a mapping")
    _unknown(env, _ENV_KEYS, "environment")
    if env.get("preset") not in ENV_PRESETS:
        raise ConfigError(f"environment.preset must be one of {sorted(ENV_PRESETS)}")
    overrides = dict(env.get("overrides") or {})
    kernel = dict(raw.get("kernel") or {"type": "rbf", "lengthscale": 0.2})
    _unknown(kernel, _KERNEL_KEYS, "kernel")
    if kernel.get("type") not in ("linear", "rbf", "matern"):
        raise ConfigError("kernel.type must be linear, rbf or matern")
    algos = raw["algorithms"]
    if not isinstance(algos, list) or not algos:
        raise ConfigError("algorithms must be a non-empty list")
    specs = [_algorithm(a, i) for i, a in enumerate(algos)]
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"algorithm labels must be unique, got {labels}")
    solver = dict(raw.get("solver") or {})
    _unknown(solver, _SOLVER_KEYS, "solver")
    cps = _int(raw.get("checkpoints", 10), "checkpoints", 1)
    wt = raw.get("write_traces", True)
    if not isinstance(wt, bool):
        raise ConfigError("write_traces must be a boolean")
    return ExperimentConfig(
        name=str(raw.get("name", "experiment")),
        T=T, N=N, d=d,
        seeds=_seeds(raw["seeds"]),
        environment=env["preset"],
        env_overrides=overrides,
        kernel=kernel,
        algorithms=specs,
        output=str(raw.get("output", "results")),
        solver_tol=_pos(solver.get("tol", 1e-6), "solver.tol"),
        gamma_tol=_pos(solver.get("gamma_tol", 1e-4), "solver.gamma_tol"),
        checkpoints=cps,
        write_traces=wt,
    )


def _set_path(d: dict, dotted: str, value: Any) -> dict:
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        nxt = cur.get(k)
        if not isinstance(nxt, dict):
            nxt = {}
            cur[k] = nxt
        cur = nxt
    cur[keys[-1]] = value
    return d


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``key.path=value`` strings; values are parsed as YAML scalars.

    ``algorithms.<label>.params.x=1`` addresses an algorithm by its label.
    """
    out = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        value = yaml.safe_load(text)
        parts = key.strip().split(".")
        if parts[0] == "algorithms" and len(parts) > 2:
            matches = [a for a in out.get("algorithms", []) if a.get("label", a.get("id")) == parts[1]]
            if not matches:
                raise ConfigError(f"no algorithm labelled {parts[1]!r}")
            _set_path(matches[0], ".".join(parts[2:]), value)
        else:
            _set_path(out, ".".join(parts), value)
    return out


def load_config(path, overrides=()) -> ExperimentConfig:
    """Read a YAML file, apply overrides and validate."""
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(apply_overrides(raw, overrides))


def _fmt(v):
    return ",".join(map(str, v)) if isinstance(v, (list, tuple)) else str(v)


def expand_grid(spec: AlgorithmSpec) -> list:
    """Cartesian product of an algorithm's grid, as labelled specs without grids.

    Grid keys may be dotted (``network.eta``).  Keys are expanded in sorted
    order so labels are stable.
    """
    if not spec.grid:
        return [AlgorithmSpec(spec.id, spec.label, copy.deepcopy(spec.params))]
    keys = sorted(spec.grid)
    out = []
    for combo in itertools.product(*(spec.grid[k] for k in keys)):
        params = copy.deepcopy(spec.params)
        for k, v in zip(keys, combo):
            _set_path(params, k, v)
        tag = ",".join(f"{k}={_fmt(v)}" for k, v in zip(keys, combo))
        out.append(AlgorithmSpec(spec.id, f"{spec.label}[{tag}]", params))
    return out
