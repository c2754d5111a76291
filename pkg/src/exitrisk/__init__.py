"""Continuous-time failure-probability estimation for stochastic closed-loop systems."""
from .belief import GaussianBelief, LqgDesign, design_lqg, propagate_belief, truncate_gaussian_1d
from .estimators import METHODS, RiskReport, TimePartition, run_method
from .exit_kernel import QuadratureSpec, interval_exit_prob, psi
from .monte_carlo import McConfig, McResult, estimate_mc
from .scenarios import Scenario, generate_batch, load_scenario, synthesize_nominal
from .sde_models import ItoSystem, SafeSet, circle_obstacle, dubins_system, halfplane_constraint

__version__ = "0.1.0"
