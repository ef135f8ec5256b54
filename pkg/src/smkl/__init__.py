"""Misspecified maximum likelihood for finite-state semi-Markov models.

Exact oracles (KL projections, potential-operator sandwich covariances)
sit next to the estimators they describe, and a seeded Monte Carlo
harness checks one against the other.
"""

import types as _types

from .asymptotics import (
    PotentialOperator,
    SandwichReport,
    a_operator,
    clt_variance,
    fisher_q,
    fisher_r,
    fisher_s,
    potential,
    sandwich_oracle,
    sandwich_plugin,
    triple_conditional_moments,
)
from .empirical import EmpiricalMeasures, build, expect_pairs, expect_triples
from .errors import SMKLError
from .estimators import (
    EstimateReport,
    fit,
    fit_ar1_gaussian,
    fit_ar1_least_squares,
    fit_exponential_closed_form,
    fit_marginal_pair,
    fit_q,
    fit_r,
    fit_s,
)
from .experiments import (
    MCReport,
    PerturbationDirection,
    Scenario,
    lan_diagnostic,
    marginal_gap_sd,
    martingale_clt_check,
    plugin_check,
    remark6_diagnostic,
    run_mc,
)
from .kernels import (
    ChainKernel,
    ExponentialRFamily,
    ExponentialStateRFamily,
    GammaRFamily,
    SaturatedQFamily,
    SModel,
    SojournKernel,
    TiltQFamily,
    conditional_mean_sojourn,
    score_identity_report,
    stationary_distribution,
)
from .oracle import KLResult, PopulationLaw, ar1_kl_projection, kl_information, kl_projection
from .simulator import RenewalPath, SimConfig, make_rng, simulate, simulate_ar1

__version__ = "0.1.0"

__all__ = sorted(name for name, obj in dict(globals()).items()
                 if not name.startswith("_") and not isinstance(obj, _types.ModuleType))
