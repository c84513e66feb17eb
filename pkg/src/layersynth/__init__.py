"""Multi-layered abstraction-based controller synthesis for stochastic LTI systems.

Builds discretization-based (gridded) and discretization-free (waypoint)
abstractions of a discrete-time linear stochastic system, quantifies their
similarity with multi-layered (epsilon, delta) simulation relations, runs
robust dynamic programming against an scLTL specification compiled to a DFA,
and refines the result into a controller with a certified lower bound on the
satisfaction probability.
"""

from .errors import (
    ContractError,
    ConfigurationError,
    ResourceError,
    InfeasibleError,
    PartialModelError,
)
from .model import LtiGmdp, LabelMap, Region, Trace, step, output_letter
from .scltl import parse_scltl
from .dfa import Dfa, to_dfa, dfa_step, accepts
from .grid import GridAbstraction, build_grid, transition_factors, project
from .qeps import QepsTable, qeps_plus
from .simrel import (
    LayerSpec,
    weighting_matrix,
    shift_radius,
    check_feasibility,
    min_delta,
    layer_matrix,
)
from .waypoints import (
    WaypointModel,
    epsilon_w,
    is_well_posed_point,
    is_well_posed_edge,
    build_waypoint_model,
    strongly_connected,
)
from .dp import (
    ValueField,
    Policy,
    SwitchSets,
    robust_backup_db,
    robust_backup_df,
    compute_switch_sets,
    heterogeneous_sweep,
    optimize_switch_strategy,
    synthesize,
)
from .refine import RefinedController, control_step, monte_carlo

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "ConfigurationError",
    "ResourceError",
    "InfeasibleError",
    "PartialModelError",
    "LtiGmdp",
    "LabelMap",
    "Region",
    "Trace",
    "step",
    "output_letter",
    "parse_scltl",
    "Dfa",
    "to_dfa",
    "dfa_step",
    "accepts",
    "GridAbstraction",
    "build_grid",
    "transition_factors",
    "project",
    "QepsTable",
    "qeps_plus",
    "LayerSpec",
    "weighting_matrix",
    "shift_radius",
    "check_feasibility",
    "min_delta",
    "layer_matrix",
    "WaypointModel",
    "epsilon_w",
    "is_well_posed_point",
    "is_well_posed_edge",
    "build_waypoint_model",
    "strongly_connected",
    "ValueField",
    "Policy",
    "SwitchSets",
    "robust_backup_db",
    "robust_backup_df",
    "compute_switch_sets",
    "heterogeneous_sweep",
    "optimize_switch_strategy",
    "synthesize",
    "RefinedController",
    "control_step",
    "monte_carlo",
    "__version__",
]
