"""TAP free energy, AMP and natural-gradient solvers for Z2-synchronization."""

__version__ = "0.1.0"

from .errors import ConfigError, ConvergenceError, DomainError, TapSyncError  # noqa: E402
from .model import ModelInstance, NoiseEnsemble, load_instance, sample_instance, save_instance  # noqa: E402
from .scalar import ScalarConstants, scalar_constants, solve_q_star, state_evolution  # noqa: E402
from .energy import f_tap, f_vb, grad_tap, hess_matvec  # noqa: E402
from .solvers import Method, SolverConfig, Status, find_m_star, run_solver, spectral_init  # noqa: E402
from .diagnostics import DiagnosticsReport, diagnose  # noqa: E402
from .landscape import E_lambda, bar_E, landscape_grid  # noqa: E402

__all__ = [
    "ConfigError", "ConvergenceError", "DomainError", "TapSyncError",
    "ModelInstance", "NoiseEnsemble", "load_instance", "sample_instance", "save_instance",
    "ScalarConstants", "scalar_constants", "solve_q_star", "state_evolution",
    "f_tap", "f_vb", "grad_tap", "hess_matvec",
    "Method", "SolverConfig", "Status", "find_m_star", "run_solver", "spectral_init",
    "DiagnosticsReport", "diagnose",
    "E_lambda", "bar_E", "landscape_grid",
]
