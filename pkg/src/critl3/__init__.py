"""Critical-space (L3) Navier-Stokes toolkit on the periodic box.

Spectral field algebra, the heat/Stokes flow and its estimates, the mild
solution by Picard iteration, the energy correction ``v2 = v - v1`` with its
energy audits, and the experiments tying them together.
"""

__version__ = "0.1.0"

from .lab import ExperimentConfig  # noqa: E402
from .mild import MildSolution, picard_solve, select_horizon  # noqa: E402
from .perturbation import PerturbationRun, run_perturbation  # noqa: E402
from .presets import preset_initial_data  # noqa: E402
from .reports import ConvergenceTrace, EstimateReport  # noqa: E402
from .spectral import FieldHistory, Grid, VectorField  # noqa: E402

__all__ = [
    "ConvergenceTrace", "EstimateReport", "ExperimentConfig", "FieldHistory", "Grid",
    "MildSolution", "PerturbationRun", "VectorField", "picard_solve", "preset_initial_data",
    "run_perturbation", "select_horizon", "__version__",
]
