"""Kernel and neural bandits for non-stationary rewards.

Modules
-------
kernels      kernels, Gram matrices and equivalent finite feature maps
design       design matrices, information gain, optimal designs, OP solver
estimation   inverse-propensity reward estimates and empirical gaps
adaopkb      block algorithm, replay schedule, restart test
neural       ReLU networks, training and gradient feature maps
baselines    GP-UCB and its sliding-window variant
envs         switching GP and cosine environments, regret accounting
harness      configuration, seeded streams, experiment runner and CLI
"""
from .adaopkb import AlgoParams, ada_opkb_run, opkb_run, schedule, restart_test
from .design import Strategy, design_matrix, info_gain, op_solve, optimal_design
from .envs import Environment, RegretTrace, make_env
from .kernels import RBF, ActionSet, FeatureMap, Linear, Matern, cholesky_feature_map, gram

__version__ = "0.1.0"

__all__ = [
    "AlgoParams",
    "ada_opkb_run",
    "opkb_run",
    "schedule",
    "restart_test",
    "Strategy",
    "design_matrix",
    "info_gain",
    "op_solve",
    "optimal_design",
    "Environment",
    "RegretTrace",
    "make_env",
    "RBF",
    "ActionSet",
    "FeatureMap",
    "Linear",
    "Matern",
    "cholesky_feature_map",
    "gram",
]
