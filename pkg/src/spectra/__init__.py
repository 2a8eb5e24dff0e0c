"""Successive per-user approximation methods for multi-carrier spectrum balancing."""

from .channel import (Channel, SynthesisParams, ScenarioError, dbm_to_mw, mw_to_dbm,
                      generate_synthetic, load_scenario, save_scenario, zero_allocation)
from .objective import (TonePoint, interference, per_tone_objective, rates,
                        restriction_derivatives, total_objective)
from .approximations import (Approximation, ApproximationSpec, MethodKind, NAMED_KINDS,
                             build, parse_method)
from .subproblem import real_roots, solve_closed_form, solve_fixed_point

__version__ = "0.1.0"
