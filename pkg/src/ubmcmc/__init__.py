"""Unbiased estimation under discretized probability measures.

Monte Carlo estimates of posterior expectations whose discretization and
burn-in biases are both removed exactly: a randomized discretization level
debiases the numerical forward solve, and coupled MCMC chains that meet
after a random number of steps debias the finite chain length.  Averaging
independent replicates therefore converges to the exact-limit expectation
at the usual 1/N rate, with no tuning of "enough burn-in" or "fine enough
mesh" required.

Entry points:

* :func:`single_term` / :func:`independent_sum` — one replicate of the two
  debiasing schemes;
* :func:`sgd_run` — stochastic-gradient parameter fitting driven by
  debiased score estimates;
* :func:`run_experiment` — the named studies behind the command-line tool;
* :mod:`ubmcmc.models` — built-in targets (analytic Gaussian toy, 1-d
  elliptic boundary-value problem, epidemic compartment ODE).
"""

from .errors import (
    ConfigError,
    CouplingStallError,
    GradientUnavailableError,
    InitializationError,
    IntegratorError,
    InvalidCurrentStateError,
    LevelCapExceededError,
    LevelTooLargeError,
    NonMeetingError,
    ScoreUnavailableError,
    UbmcmcError,
)
from .estimators import (
    EstimatorConfig,
    RunRecord,
    UnbiasedEstimate,
    average_replicates,
    estimate_fixed_level,
    estimate_increment,
    independent_sum,
    lift_state_fn,
    run_coupled_pair,
    run_coupled_quad,
    single_term,
)
from .experiments import (
    ExperimentConfig,
    ExperimentResult,
    RateFit,
    fit_rate,
    load_config,
    meeting_time_report,
    resolve_config,
    run_experiment,
)
from .kernels import CoupledKernel, HmcSettings, KernelSettings, leapfrog, mh_accept
from .levels import LevelDistribution, LevelSchedule
from .models import (
    MODEL_NAMES,
    EllipticModel,
    SirxModel,
    ToyModel,
    make_data,
    make_model,
)
from .proposals import GaussianProposal
from .rng import ReplicateStreams, replicate_streams
from .sgd import SgdConfig, SgdDivergedError, SgdTrace, sgd_run
from .targets import CostLedger, DiscretizedTarget

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # errors
    "ConfigError",
    "CouplingStallError",
    "GradientUnavailableError",
    "InitializationError",
    "IntegratorError",
    "InvalidCurrentStateError",
    "LevelCapExceededError",
    "LevelTooLargeError",
    "NonMeetingError",
    "ScoreUnavailableError",
    "SgdDivergedError",
    "UbmcmcError",
    # randomness and levels
    "ReplicateStreams",
    "replicate_streams",
    "LevelDistribution",
    "LevelSchedule",
    # targets and models
    "CostLedger",
    "DiscretizedTarget",
    "MODEL_NAMES",
    "EllipticModel",
    "SirxModel",
    "ToyModel",
    "make_data",
    "make_model",
    # proposals and kernels
    "GaussianProposal",
    "CoupledKernel",
    "HmcSettings",
    "KernelSettings",
    "leapfrog",
    "mh_accept",
    # estimators
    "EstimatorConfig",
    "RunRecord",
    "UnbiasedEstimate",
    "average_replicates",
    "estimate_fixed_level",
    "estimate_increment",
    "independent_sum",
    "lift_state_fn",
    "run_coupled_pair",
    "run_coupled_quad",
    "single_term",
    # parameter fitting
    "SgdConfig",
    "SgdTrace",
    "sgd_run",
    # experiments
    "ExperimentConfig",
    "ExperimentResult",
    "RateFit",
    "fit_rate",
    "load_config",
    "meeting_time_report",
    "resolve_config",
    "run_experiment",
]
