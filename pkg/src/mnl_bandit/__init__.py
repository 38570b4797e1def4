"""Multinomial logistic bandits: model, K-ATA-LOG policy, oracles and experiment harness."""

from .core import (
    ConvergenceError,
    DegenerateInstanceError,
    InvalidInputError,
    NumericalDegeneracyError,
    kappa_bounds,
    softmax,
    softmax_gradient,
)
from .environment import ProblemInstance, build_instance
from .gram import Ellipsoid, EllipsoidProjector, GramState
from .kata_log import KataLog, PolicyConfig, baseline_greedy_mle, baseline_random, kata_log_run, run

__version__ = "0.1.0"
