"""Delay-aware federated learning: convergence bounds, resource allocation and simulation."""

__version__ = "0.1.0"

from .alpha_opt import alpha_closed_form, alpha_numeric, build_schedule
from .bounds import (CombinerSchedule, HyperParams, MinibatchSchedule, NetworkSnapshot, PreconditionError,
                     capital_psi, empirical_divergence, loss_gap, noise_bound, psi_term, sigma)
from .cost_model import CostWeights, DeviceProfile, objective_value
from .gp.solver import solve_sp
from .numerics import Dataset, estimate_constants, generate_synthetic
from .simulator import SimConfig, SimTrace, aggregate, run_training, select_best, synchronize

__all__ = [
    "CombinerSchedule", "CostWeights", "Dataset", "DeviceProfile", "HyperParams", "MinibatchSchedule",
    "NetworkSnapshot", "PreconditionError", "SimConfig", "SimTrace", "aggregate", "alpha_closed_form",
    "alpha_numeric", "build_schedule", "capital_psi", "empirical_divergence", "estimate_constants",
    "generate_synthetic", "loss_gap", "noise_bound", "objective_value", "psi_term", "run_training",
    "select_best", "sigma", "solve_sp", "synchronize",
]
