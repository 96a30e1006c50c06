"""Covariance-structure estimation and omitted-parameter search for panel models."""

__version__ = "0.1.0"

from .dsl import ModelSpec, Op, ParameterSpec, enumerate_candidates, format_model, parse_model
from .errors import PanelWaldError
from .estimator import (FitIndices, FitOptions, FitResult, SampleMoments, fit, fit_independence,
                        fit_indices, heywood_check, ml_discrepancy)
from .matrices import (ImpliedCovariance, RamSystem, RiclpmClosedForm, build_ram,
                       fisher_information, identification_check, implied_sigma_closed_form,
                       implied_sigma_ram)
from .score_wald import LmCandidate, WaldStep, forward_stepwise_wald, lm_scan, wald_of
from .simulator import (PopulationScenario, SimulationConfig, SimulationSummary, get_scenario,
                        run_calibration, run_detection, scenario_library)
from .twoslw import TwoSlwConfig, TwoSlwReport, run_2slw

__all__ = [
    "ModelSpec", "Op", "ParameterSpec", "enumerate_candidates", "format_model", "parse_model",
    "PanelWaldError", "FitIndices", "FitOptions", "FitResult", "SampleMoments", "fit",
    "fit_independence", "fit_indices", "heywood_check", "ml_discrepancy", "ImpliedCovariance",
    "RamSystem", "RiclpmClosedForm", "build_ram", "fisher_information", "identification_check",
    "implied_sigma_closed_form", "implied_sigma_ram", "LmCandidate", "WaldStep",
    "forward_stepwise_wald", "lm_scan", "wald_of", "PopulationScenario", "SimulationConfig",
    "SimulationSummary", "get_scenario", "run_calibration", "run_detection", "scenario_library",
    "TwoSlwConfig", "TwoSlwReport", "run_2slw",
]
