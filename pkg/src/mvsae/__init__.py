"""Multivariate shared-component small area estimation."""

__version__ = "0.1.0"

from .diagnostics import diagnose, ess, split_rhat  # noqa: E402
from .direct import DirectEstimateSet, design_covariance, direct_estimates, hajek_mean  # noqa: E402
from .evaluation import loo_logscore_area, loo_logscore_unit, simulation_metrics  # noqa: E402
from .mcmc import FitConfig, ModelFit, fit, fit_many  # noqa: E402
from .models import AreaModelSpec, PriorConfig, UnitModelSpec, model_spec  # noqa: E402
from .simulation import ScenarioConfig, generate_area_scenario, generate_unit_scenario, run_simulation_study  # noqa: E402
from .spatial import (Bym2Effect, build_icar_precision, compute_scaling, realize_bym2,  # noqa: E402
                      sample_constrained_icar, scaled_icar)
from .survey import (AdjacencyGraph, RuralFractions, SurveyDataset, default_geography, lattice_graph,  # noqa: E402
                     load_adjacency, load_survey_csv)

__all__ = [
    "AdjacencyGraph", "AreaModelSpec", "Bym2Effect", "DirectEstimateSet", "FitConfig", "ModelFit", "PriorConfig",
    "RuralFractions", "ScenarioConfig", "SurveyDataset", "UnitModelSpec", "build_icar_precision",
    "compute_scaling", "default_geography", "design_covariance", "diagnose", "direct_estimates", "ess", "fit",
    "fit_many", "generate_area_scenario", "generate_unit_scenario", "hajek_mean", "lattice_graph",
    "load_adjacency", "load_survey_csv", "loo_logscore_area", "loo_logscore_unit", "model_spec",
    "realize_bym2", "run_simulation_study", "sample_constrained_icar", "scaled_icar", "simulation_metrics",
    "split_rhat",
]
