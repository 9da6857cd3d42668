"""Similarity quantification for linear stochastic systems.

Quantifies how closely a finite-state (optionally reduced-order) abstraction
tracks a discrete-time linear stochastic system, expressed as an output
deviation bound epsilon and a per-step probability deviation delta, and uses
the certified pair to synthesize controllers with a guaranteed lower bound on
the satisfaction probability of co-safe temporal-logic specifications.
"""

from .coupling import (
    CouplingSpec,
    delta_from_gamma,
    radius_from_delta,
    sample_maximal_coupling,
)
from .models import Box, GridAbstraction, GridSpec, LtiModel, build_grid, probability_row, project
from .mor import ReducedModel, build_reduced, compose_transitive, optimize_epsilon_mor
from .simrel import SimRelation, assemble_lmis, optimize_epsilon, scalar_oracle, verify_relation
from .specs import (
    Dfa,
    Proposition,
    RobustLabeling,
    robust_labels,
    template_bounded_invariance,
    template_reach_avoid,
)
from .synthesis import (
    AbstractPolicy,
    ValueTable,
    monte_carlo_validate,
    refine_controller,
    robust_value_iteration,
    satisfaction_bounds,
)

__version__ = "0.1.0"

__all__ = [
    "Box",
    "LtiModel",
    "GridSpec",
    "GridAbstraction",
    "build_grid",
    "probability_row",
    "project",
    "CouplingSpec",
    "delta_from_gamma",
    "radius_from_delta",
    "sample_maximal_coupling",
    "SimRelation",
    "assemble_lmis",
    "optimize_epsilon",
    "verify_relation",
    "scalar_oracle",
    "ReducedModel",
    "build_reduced",
    "optimize_epsilon_mor",
    "compose_transitive",
    "Proposition",
    "Dfa",
    "RobustLabeling",
    "template_reach_avoid",
    "template_bounded_invariance",
    "robust_labels",
    "ValueTable",
    "AbstractPolicy",
    "robust_value_iteration",
    "satisfaction_bounds",
    "refine_controller",
    "monte_carlo_validate",
]
