"""Distributed linear two-time-scale stochastic approximation over two graphs."""

from .algorithm import IterateState, StepSchedule, Trajectory, run, step, step_matrix
from .network import build_topology, lazy_weights, metropolis_weights, sigma_pair
from .noise import iso_noise_model, make_noise_model
from .problem import BlockSystem, exact_solution, gtd_instance, random_instance

__version__ = "0.1.0"
