"""Bregman mirror descent for measure-valued stochastic control on scenario trees."""
from .adjoint import (AdjointField, bmo_diagnostic, hamiltonian_flat_derivative, hamiltonian_value,
                      solve_adjoint)
from .dynamics import (LQControlledSigma, LQModel, LQModelParams, ModelCoefficients, assumption_audit,
                       sensitivity_process, simulate_state)
from .errors import (BmdpError, CalibrationFailed, ConfigError, ImplicitStepDiverged, IncompatibleReports,
                     InnerSolveFailed, InsufficientData, InvalidMeasure, LevelMismatch, NonFiniteState,
                     OracleDidNotConverge, OracleTooLarge, ParseError, RangeError, SchemaError,
                     SinkhornDiverged, SizeExceeded, ZeroAtomInKL)
from .measures import (ActionSpace, AnchoredDivergence, ChiSquared, Composite, EntropicOT, Measure,
                       RelativeEntropy, bregman, h_value, mirror_step, sinkhorn_potentials)
from .solver import (ControlField, ConvergenceReport, MirrorDescentConfig, calibrate_lambda, cost,
                     first_variation, fit_rate, mirror_iterate, oracle_optimal_control,
                     run_mirror_descent, theorem_probes)
from .tree import ScenarioTree, build_tree, conditional_expectation, expectation_pathwise

__all__ = [
    # measures
    "ActionSpace", "AnchoredDivergence", "ChiSquared", "Composite", "EntropicOT", "Measure",
    "RelativeEntropy", "bregman", "h_value", "mirror_step", "sinkhorn_potentials",
    # tree
    "ScenarioTree", "build_tree", "conditional_expectation", "expectation_pathwise",
    # dynamics
    "LQControlledSigma", "LQModel", "LQModelParams", "ModelCoefficients", "assumption_audit",
    "sensitivity_process", "simulate_state",
    # adjoint
    "AdjointField", "bmo_diagnostic", "hamiltonian_flat_derivative", "hamiltonian_value", "solve_adjoint",
    # solver
    "ControlField", "ConvergenceReport", "MirrorDescentConfig", "calibrate_lambda", "cost",
    "first_variation", "fit_rate", "mirror_iterate", "oracle_optimal_control", "run_mirror_descent",
    "theorem_probes",
    # errors
    "BmdpError", "CalibrationFailed", "ConfigError", "ImplicitStepDiverged", "IncompatibleReports",
    "InnerSolveFailed", "InsufficientData", "InvalidMeasure", "LevelMismatch", "NonFiniteState",
    "OracleDidNotConverge", "OracleTooLarge", "ParseError", "RangeError", "SchemaError", "SinkhornDiverged",
    "SizeExceeded", "ZeroAtomInKL",
]
