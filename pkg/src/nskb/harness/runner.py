"""Run experiment cells, write trace and summary CSVs, and rank grid points.

A cell is one (algorithm, seed) pair.  Every algorithm sees the same
environment for a given seed.  Each cell draws from its own named streams
(see :mod:`nskb.harness.rng`), so results do not depend on execution order
or worker count.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..adaopkb import AlgoParams, StaticMaps, run_blocks
from ..baselines import GPUCBParams, gpucb_run
from ..design import info_gain
from ..envs import Environment, RegretTrace, make_env
from ..kernels import kernel_feature_map, kernel_from_dict
from ..neural import NeuralMaps, init_mlp
from .config import AlgorithmSpec, ExperimentConfig, expand_grid
from .rng import stream

logger = logging.getLogger(__name__)

__all__ = [
    "TRACE_COLUMNS",
    "SUMMARY_COLUMNS",
    "LEADERBOARD_COLUMNS",
    "CellResult",
    "ExperimentResult",
    "build_env",
    "run_cell",
    "run_experiment",
    "grid_search",
    "checkpoints",
    "worker_count",
    "WORKERS_ENV",
]

TRACE_COLUMNS = ["t", "epoch", "block", "strategy_index", "action", "reward",
                 "inst_regret", "cum_regret", "restart_flag"]
SUMMARY_COLUMNS = ["algorithm", "environment", "checkpoint", "n_seeds", "mean_cum_regret",
                   "stderr_cum_regret", "mean_restarts"]
LEADERBOARD_COLUMNS = ["rank", "algorithm", "params", "n_seeds", "mean_final_regret",
                       "stderr_final_regret", "mean_restarts", "failures"]
WORKERS_ENV = "NSKB_WORKERS"

_BLOCK_DEFAULTS = {"sigma": 1.0, "delta": 0.05}
_NET_DEFAULTS = {"m": 256, "L": 3, "eta": 1e-3, "J": 100, "lam": 1.0, "reward_scale": 1.0}


@dataclass
class CellResult:
    label: str
    seed: int
    final_regret: float = math.nan
    cum_at: list = field(default_factory=list)
    restarts: int = 0
    clamps: int = 0
    trace_path: str | None = None
    error: str | None = None


@dataclass
class ExperimentResult:
    cells: list
    summary_path: Path | None
    summary_rows: list

    @property
    def failures(self) -> list:
        return [c for c in self.cells if c.error is not None]


def worker_count() -> int:
    """Worker processes from ``NSKB_WORKERS`` (default 1, run inline)."""
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def checkpoints(T: int, k: int = 10) -> list:
    """``k`` evenly spaced round counts ending at ``T``."""
    return sorted({max(1, int(round(T * i / k))) for i in range(1, k + 1)})


def build_env(cfg: ExperimentConfig, seed: int) -> Environment:
    return make_env(cfg.environment, cfg.T, cfg.N, cfg.d, stream(seed, "environment"), **cfg.env_overrides)


def _block_params(params: dict, cfg: ExperimentConfig, gamma: float) -> AlgoParams:
    p = {**_BLOCK_DEFAULTS, **{k: v for k, v in params.items() if k != "network"}}
    mode = p.pop("mode", "tuned")
    common = dict(T=cfg.T, N=cfg.N, gamma=gamma, sigma=float(p.pop("sigma")),
                  delta=float(p.pop("delta")), solver_tol=cfg.solver_tol)
    if mode == "theory":
        return AlgoParams.theory(**common)
    return AlgoParams.tuned(**common, **{k: float(v) for k, v in p.items()})


def run_algorithm(spec: AlgorithmSpec, cfg: ExperimentConfig, env: Environment, seed: int) -> RegretTrace:
    """Run one algorithm on ``env`` with the seed's learner, scheduler and network streams."""
    params = spec.params
    if spec.id in ("gpucb", "sw-gpucb"):
        phi = kernel_feature_map(kernel_from_dict(cfg.kernel), env.actions)
        ucb = GPUCBParams(**params)
        if spec.id == "gpucb" and ucb.window is not None:
            ucb = GPUCBParams(**{**params, "window": None})
        return gpucb_run(env, phi, ucb, T=cfg.T)
    adaptive = spec.id.startswith("ada-")
    sigma = float(params.get("sigma", _BLOCK_DEFAULTS["sigma"]))
    if spec.id.endswith("opnn"):
        net_cfg = {**_NET_DEFAULTS, **params.get("network", {})}
        net0 = init_mlp(cfg.d, int(net_cfg["m"]), int(net_cfg["L"]), stream(seed, "network"))
        maps = NeuralMaps(env.actions, net0, cfg.T, sigma, lam=float(net_cfg["lam"]),
                          eta=float(net_cfg["eta"]), J=int(net_cfg["J"]),
                          reward_scale=float(net_cfg["reward_scale"]), tol=cfg.gamma_tol)
        gamma = maps.gain0.gamma
    else:
        phi = kernel_feature_map(kernel_from_dict(cfg.kernel), env.actions)
        gain = info_gain(phi, cfg.T, sigma, tol=cfg.gamma_tol)
        maps = StaticMaps(phi, cfg.T, sigma, gain=gain)
        gamma = gain.gamma
    ap = _block_params(params, cfg, gamma)
    res = run_blocks(env, maps, ap, stream(seed, "learner"), sched_rng=stream(seed, "scheduler"),
                     adaptive=adaptive)
    return res.trace


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(int(v)) if isinstance(v, (np.integer,)) else str(v)


def trace_csv(trace: RegretTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    cum = trace.cum_regret
    for t in range(len(trace)):
        w.writerow([t, int(trace.epoch[t]), int(trace.block[t]), int(trace.strategy_index[t]),
                    int(trace.actions[t]), _fmt(trace.rewards[t]), _fmt(trace.inst_regret[t]),
                    _fmt(cum[t]), int(trace.restart_flag[t])])
    return buf.getvalue()


def write_atomic(path: Path, text: str):
    """Write via a temporary file in the same directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _safe(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_.=," else "_" for c in label)


def run_cell(cfg: ExperimentConfig, spec: AlgorithmSpec, seed: int, trace_dir: str | None = None) -> CellResult:
    """Run one cell; exceptions are captured in ``CellResult.error``."""
    out = CellResult(spec.label, seed)
    try:
        env = build_env(cfg, seed)
        trace = run_algorithm(spec, cfg, env, seed)
        cum = trace.cum_regret
        out.final_regret = float(cum[-1])
        out.cum_at = [float(cum[c - 1]) for c in checkpoints(len(trace), cfg.checkpoints)]
        out.restarts = trace.restarts
        out.clamps = trace.clamp_count
        if trace_dir is not None:
            path = Path(trace_dir) / f"{_safe(spec.label)}_seed{seed}.csv"
            write_atomic(path, trace_csv(trace))
            out.trace_path = str(path)
    except Exception as exc:  # one failing cell must not stop the others
        out.error = f"{type(exc).__name__}: {exc}"
        logger.error("cell %s seed %d failed\n%s", spec.label, seed, traceback.format_exc())
    return out


def _run_cells(cfg, jobs, trace_dir, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [run_cell(cfg, spec, seed, trace_dir) for spec, seed in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(run_cell, cfg, spec, seed, trace_dir) for spec, seed in jobs]
        return [f.result() for f in futs]


def _mean_se(vals):
    v = np.asarray(vals, dtype=float)
    mean = float(v.mean())
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size >= 2 else None
    return mean, se


def summarize(cfg: ExperimentConfig, cells, labels) -> list:
    """Mean and standard error of cumulative regret at each checkpoint, per algorithm."""
    rows = []
    cps = checkpoints(cfg.T, cfg.checkpoints)
    for label in labels:
        ok = [c for c in cells if c.label == label and c.error is None]
        if not ok:
            continue
        restarts = float(np.mean([c.restarts for c in ok]))
        for i, cp in enumerate(cps):
            mean, se = _mean_se([c.cum_at[i] for c in ok])
            rows.append({"algorithm": label, "environment": cfg.environment, "checkpoint": cp,
                         "n_seeds": len(ok), "mean_cum_regret": mean, "stderr_cum_regret": se,
                         "mean_restarts": restarts})
    return rows


def _rows_csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r[c] is None else _fmt(r[c]) for c in columns])
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> ExperimentResult:
    """Run every (algorithm, seed) cell and write traces plus ``summary.csv`` under ``cfg.output``."""
    workers = worker_count() if workers is None else workers
    out = Path(cfg.output)
    trace_dir = str(out / "traces") if cfg.write_traces else None
    specs = [s for a in cfg.algorithms for s in expand_grid(a)]
    jobs = [(s, seed) for s in specs for seed in cfg.seeds]
    cells = _run_cells(cfg, jobs, trace_dir, workers)
    rows = summarize(cfg, cells, [s.label for s in specs])
    path = out / "summary.csv"
    write_atomic(path, _rows_csv(SUMMARY_COLUMNS, rows))
    failed = [c for c in cells if c.error is not None]
    if failed:
        write_atomic(out / "failures.csv", _rows_csv(
            ["algorithm", "seed", "error"],
            [{"algorithm": c.label, "seed": c.seed, "error": c.error} for c in failed]))
    return ExperimentResult(cells, path, rows)


def grid_search(cfg: ExperimentConfig, workers: int | None = None) -> ExperimentResult:
    """Evaluate every grid point over the seeds and write ``leaderboard.csv`` ranked by final regret."""
    workers = worker_count() if workers is None else workers
    out = Path(cfg.output)
    specs = [s for a in cfg.algorithms for s in expand_grid(a)]
    jobs = [(s, seed) for s in specs for seed in cfg.seeds]
    cells = _run_cells(cfg, jobs, None, workers)
    board = []
    for s in specs:
        ok = [c for c in cells if c.label == s.label and c.error is None]
        nfail = sum(1 for c in cells if c.label == s.label and c.error is not None)
        mean, se = _mean_se([c.final_regret for c in ok]) if ok else (math.inf, None)
        board.append({"algorithm": s.label, "params": json.dumps(s.params, sort_keys=True),
                      "n_seeds": len(ok), "mean_final_regret": mean, "stderr_final_regret": se,
                      "mean_restarts": float(np.mean([c.restarts for c in ok])) if ok else None,
                      "failures": nfail})
    board.sort(key=lambda r: (r["failures"] > 0, r["mean_final_regret"]))
    for i, r in enumerate(board, 1):
        r["rank"] = i
    path = out / "leaderboard.csv"
    write_atomic(path, _rows_csv(LEADERBOARD_COLUMNS, board))
    return ExperimentResult(cells, path, board)
