"""Numerical toolkit for singularly perturbed two-scale stochastic control systems."""

from .errors import (
    BlowUpError,
    EllipticityError,
    MonotonicityError,
    ParameterError,
    QuadratureError,
    StepSizeError,
    TwoScaleError,
)
from .model import (
    BENCHMARKS,
    AssumptionReport,
    Box,
    ControlSet,
    TwoScaleModel,
    benchmark_defaults,
    make_benchmark,
    model_from_config,
    model_to_config,
    validate_assumptions,
)
from .rng import CounterNoise
from .sde import (
    ControlPolicy,
    PathEnsemble,
    SamplePath,
    estimate_payoff,
    integrate_fast,
    integrate_two_scale,
    mc_value_lower_bound,
    simulate_ensemble,
    simulate_fast_ensemble,
    simulate_path_ensemble,
)
from .ergodic import (
    EmpiricalMeasure,
    exit_time_ensemble,
    gibbs_oracle,
    laplace_exit,
    reflected_barrier_phi,
    sample_invariant_measure,
    tv_decay_profile,
    wasserstein2_1d,
    wasserstein_bound,
)
from .homogenize import (
    CellProblemSpec,
    EffectiveHamiltonian,
    bellman_consistency,
    effective_coefficients,
    effective_hamiltonian_avg,
    effective_hamiltonian_cell_limit,
    effective_terminal_data,
    fd_cell_1d,
    feynman_kac_cell,
)
from .hjb import GridSpec, ValueField, convergence_study, solve_effective_hjb, solve_full_hjb
from .relax import (
    RelaxationSpec,
    local_entropy,
    run_deep_relaxation,
    run_effective_descent,
    trajectory_gap_study,
)

__version__ = "0.1.0"
