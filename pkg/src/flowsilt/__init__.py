"""Monte Carlo simulation and closed-form moment oracles for critical
branching diffusions driven by a shared flow noise, plus renormalized
self-intersection estimators on the simulated paths."""

from .engine import (AtomicMeasure, EnsembleResult, MartingaleSpec,
                     ObservableSpec, ParticleState, RecordedTrajectory,
                     ReplicaState, SimulationDiverged, advance,
                     init_population, integrate_test, martingale_path,
                     measure_at, pair_integrate, quadratic_variation_check,
                     simulate_ensemble, write_replicate_csv)
from .genealogy import (AncestryRecord, Label, Topology, ancestor_at,
                        arrangement_count, classify_topology, mrca)
from .green import (GreenFunction, GreenUsageError, MollifiedGreen,
                    mollifier_radial, mollify_green, resolvent_green)
from .harness import (CheckResult, ConfigError, ExperimentConfig, StatReport,
                      config_from_dict, load_config, run_experiment,
                      write_report)
from .model import (CallableFunction, CoefficientModel, ConstantOne,
                    GaussianBump, InitialMeasureSpec, TestFunction,
                    ValidationReport, a_matrix, generator_L, generator_Ln,
                    lambda_form, sigma_matrix, validate_model)
from .oracle import (GammaExpr, FreezeLeading, MergeBlocks, MomentFormula,
                     OracleModelError, diagonal_restrict, dump_terms,
                     gamma_evaluate, mixed_moment, semigroup_apply,
                     simplex_integrate)
from .silt import (EpsStudy, PairGrid, ResolutionError, SiltComponents,
                   SiltUsageError, double_point_term,
                   epsilon_convergence_study, gamma_epsilon,
                   tanaka_decomposition)

__version__ = "0.1.0"

__all__ = [
    "AtomicMeasure", "EnsembleResult", "MartingaleSpec", "ObservableSpec",
    "ParticleState", "RecordedTrajectory", "ReplicaState",
    "SimulationDiverged", "advance", "init_population", "integrate_test",
    "martingale_path", "measure_at", "pair_integrate",
    "quadratic_variation_check", "simulate_ensemble", "write_replicate_csv",
    "AncestryRecord", "Label", "Topology", "ancestor_at",
    "arrangement_count", "classify_topology", "mrca",
    "GreenFunction", "GreenUsageError", "MollifiedGreen", "mollifier_radial",
    "mollify_green", "resolvent_green",
    "CheckResult", "ConfigError", "ExperimentConfig", "StatReport",
    "config_from_dict", "load_config", "run_experiment", "write_report",
    "CallableFunction", "CoefficientModel", "ConstantOne", "GaussianBump",
    "InitialMeasureSpec", "TestFunction", "ValidationReport", "a_matrix",
    "generator_L", "generator_Ln", "lambda_form", "sigma_matrix",
    "validate_model",
    "GammaExpr", "FreezeLeading", "MergeBlocks", "MomentFormula",
    "OracleModelError", "diagonal_restrict", "dump_terms", "gamma_evaluate",
    "mixed_moment", "semigroup_apply", "simplex_integrate",
    "EpsStudy", "PairGrid", "ResolutionError", "SiltComponents",
    "SiltUsageError", "double_point_term", "epsilon_convergence_study",
    "gamma_epsilon", "tanaka_decomposition",
    "__version__",
]
