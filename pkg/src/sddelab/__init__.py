"""Simulation and verification lab for delay equations with singular drift.

The package simulates stochastic delay differential equations whose
drift splits into a possibly singular space-time part and a
segment-dependent functional part, and verifies the quantitative
estimates that make such equations tractable: exponential sup-moment
bounds, occupation (Krylov) estimates, Girsanov reweighting, the
drift-removing transform built from a backward PDE, stability in the
initial segment, and the supporting real-analysis inequalities.
"""

__version__ = "0.1.0"

from .core import (CompactSetSpec, GridAlignmentError, McEstimate, PathRole,
                   PathSegment, SamplePath, TimeGrid, compact_membership,
                   holder_seminorm, segment_extract, sup_norm, validate_pq)
from .coefficients import (CoefficientSet, DiffusionSpec, DriftSpec,
                           FunctionalDriftSpec, IntegrationError, catalog_ids,
                           ellipticity_probe, lqp_norm_numeric,
                           make_coefficients, make_diffusion, make_drift,
                           make_functional, sublinearity_probe)
from .engine import (CoupledPathEnsemble, LocalizationSpec, PathChunk,
                     PathEnsemble, SimulationConfig, SimulationDiverged,
                     StoppingKind, StoppingRecord, detect_stopping,
                     refinement_study, simulate_driftless, simulate_pair,
                     simulate_path, truncate_coefficients)
from .girsanov import (NovikovReport, WeightPath, novikov_estimate,
                       reweighted_expectation, roundtrip_log_error,
                       theta_from_drift, theta_from_functional,
                       theta_from_total_drift, weight_along_path,
                       weight_means_at)
from .zvonkin import (ContractionWindow, EmbeddingReport, PdeGrid,
                      PdeSolution, PdeSolverError, SandwichReport,
                      WindowNotFoundError, contraction_window,
                      embedding_check, ito_residual, lipschitz_profile,
                      sandwich_check, solve_backward_pde, transform_path,
                      transform_values)
from .estimates import (BetaProcess, BoundReport, DependencyError,
                        GronwallHarnessReport, HardyLittlewoodReport,
                        HolderReport, KrylovTestFunction, MultiplierPath,
                        SmoothTestFunction, StabilityReport, beta_constant,
                        beta_clipped_square, exp_moment_rhs,
                        exp_sup_moment_check, fit_krylov_constant,
                        gaussian_bump, gronwall_multiplier,
                        hardy_littlewood_check, holder_experiment,
                        khasminskii_check, krylov_check, maximal_function,
                        shrinking_support_family, smooth_linear_core,
                        stability_experiment, stochastic_gronwall_harness)

__all__ = [name for name in dir() if not name.startswith("_")]
