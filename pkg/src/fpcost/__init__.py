"""Entropy-penalized step costs und path functionals on torus grids.

Modules
-------
torus
    Grids, measures, exact transport distances, jump kernels, paths.
gaussian
    Closed-form constrained minima and tail machinery.
step
    Entropic step solver (Sinkhorn), penalized costs, kernel moments.
fp
    Fokker-Planck solver, frozen-drift semigroups, drift recovery.
pathcost
    Ladders, mollified upper bounds, relaxed-cost brackets.
harness
    Scenario orchestration, brute-force oracles, reports.
io
    Deterministic serialization of all artifacts.
"""

from .torus import (
    TorusGrid, GridMeasure, TransportPlan, JumpKernel, MeasurePath,
    make_grid, uniform_measure, dirac_measure, wrapped_gaussian_measure,
    wrap_distance, wasserstein, push_forward, path_sup_distance,
)
from .gaussian import (
    GaussianSpec, gaussian_density, wrapped_heat_kernel,
    trace_bound, diag_bound, offdiag_bound, eta_alpha,
    gap_trace, gap_diag, gap_offdiag, bar_delta, out_cost, delta0,
)
from .step import (
    SinkhornOptions, StepCostResult, TailMoments,
    solve_step, forward_velocity, covariance, kernel_moments,
    kernel_step_cost, penalized_cost, tail_moments,
)
from .fp import (
    DriftField, StochasticKernel, LadderDivergence,
    constant_drift, sine_drift, table_drift, fp_solve,
    transition_kernels, compose_kernels, frozen_step_cost,
    frozen_drift_semigroup, sde_sample, weak_residual, drift_recovery,
)
from .pathcost import (
    LadderReport, step_cost_integral, semigroup_cost_integral,
    energy_ladder, mollified_upper_bound, relaxed_bracket,
)
from .harness import (
    ConstraintSpec, ExperimentConfig, ConfigError,
    oracle_constrained_min, closed_form_value, random_spec,
    config_from_dict, run_experiment, run_scenarios, emit_report,
)

__version__ = "1.0.0"
