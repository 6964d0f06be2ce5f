"""Dam-type free-boundary problems: solver, barrier constants and porosity diagnostics."""

from .barrier import (BarrierConstants, BarrierInstance, CutoffProfile, PreconditionError, bump_height,
                      comparison_test, epsilon0, estimate_C2, gradient_trace_bound, make_cutoff, mirror_extend,
                      solve_barrier, supersolution_flux_check)
from .domain import (CoefficientField, DomainError, DomainSpec, ParameterError, flatten_point,
                     transform_coefficients, unflatten_point, validate_assumptions)
from .free_boundary import check_structure, extract_profile, fb_cells
from .grid import Grid, GridField
from .porosity import (PorosityQuery, PorosityReport, box_dimension, constructive_center, empirical_porosity,
                       porosity_sweep, predicted_constants)
from .solver import (BoundaryData, Solution, SolverError, SolverParams, residual_report, solve_linear_stage,
                     solve_vi, update_chi)

__version__ = "0.1.0"
