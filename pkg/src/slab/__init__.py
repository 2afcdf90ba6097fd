"""Stochastic Lagrangian action lab.

Exact flows and residuals (:mod:`slab.fields`, :mod:`slab.residuals`), path ensembles
(:mod:`slab.paths`), Nelson derivative estimators (:mod:`slab.nelson`), stochastic action
functionals and criticality tests (:mod:`slab.action`) and end-to-end scenarios
(:mod:`slab.lab`).
"""
from .action import (LagrangianSpec, Thresholds, VariationSpec, action_value, criticality_test,
                     el_residual, first_variation, first_variations)
from .exceptions import (ConfigError, DomainError, EstimationError, SimulationDivergedError,
                         SlabError, XiViolationError)
from .fields import ScalarField, VectorField, exact_flow, time_reverse_field
from .nelson import (NelsonParams, closed_form_backward_drift, d_mu_combine, estimate_density,
                     estimate_drift)
from .paths import (DiffusionSpec, InitialLaw, PathEnsemble, brownian_bridge_ensemble,
                    reverse_ensemble, simulate)

__version__ = "0.1.0"
