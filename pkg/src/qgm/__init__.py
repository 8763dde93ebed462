"""Quantile graphical models: conditional-independence and predictive graphs
from l1-penalized quantile regression, Delta-CoVaR networks and a simulation harness."""

__version__ = "0.1.0"

from .core import (DegenerateDesign, DimensionMismatch, EventSpec, EventTooSmall, InputError,
                   MissingConditioningColumn, QgmConfig, QgmError, RngPolicy, SampleMatrix,
                   TauGrid, ZeroColumn, check_loss, knight_gap, parse_events)
from .solver import QrFit, QrProblem, QuantileLassoRegressor, solve
from .penalty import PenaltyChoice, analytic_lambda0, bootstrap_lambda, lasso_lambda, pivotal_lambda
from .graph import GraphEstimate
from .ciqgm import ConditionalIndependenceQGM, run_ciqgm
from .pqgm import PredictiveQGM, run_pqgm
from .covar import CovarNetwork, delta_covar, var_tau
from .simgen import TrueGraph, fp_fn, gen_hub_graph, make_precision, run_simulation

__all__ = [
    "CovarNetwork", "ConditionalIndependenceQGM", "DegenerateDesign", "DimensionMismatch",
    "EventSpec", "EventTooSmall", "GraphEstimate", "InputError", "MissingConditioningColumn",
    "PenaltyChoice", "PredictiveQGM", "QgmConfig", "QgmError", "QrFit", "QrProblem",
    "QuantileLassoRegressor", "RngPolicy", "SampleMatrix", "TauGrid", "TrueGraph", "ZeroColumn",
    "analytic_lambda0", "bootstrap_lambda", "check_loss", "delta_covar", "fp_fn",
    "gen_hub_graph", "knight_gap", "lasso_lambda", "make_precision", "parse_events",
    "pivotal_lambda", "run_ciqgm", "run_pqgm", "run_simulation", "solve", "var_tau",
]
