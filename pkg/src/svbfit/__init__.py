"""Stochastic variational Bayes fitting for nonlinear forward models."""

from .errors import (
    DimensionMismatch,
    EmptyTrace,
    InvalidBatchSize,
    InvariantViolation,
    ModelEvaluationFailure,
    NonConvergence,
    NonFiniteOutput,
    NotPositiveDefinite,
    ParamCountMismatch,
    ParseError,
    SvbError,
    TagMismatch,
)
from .free_energy import ElboEstimate, HyperGradient, elbo_gradient, estimate_elbo, log_likelihood
from .gaussian import (
    GaussianSpec,
    LatentVector,
    StandardNormalDraw,
    Structure,
    cholesky,
    kl_mvn,
    mvn_logpdf,
    sample_posterior,
    standard_normal_draws,
)
from .models import (
    AslPcaslDesign,
    BiexpModel,
    DesignGrid,
    LinearModel,
    ModelSignature,
    asl_evaluate,
    asl_jacobian,
    get_model,
    model_evaluate,
    model_jacobian,
)
from .optimizer import (
    AdamState,
    Custom,
    DataDriven,
    FitResult,
    OptimizerConfig,
    PriorMatched,
    Problem,
    ProblemSet,
    adam_step,
    convergence_time,
    fit,
    fit_many,
    strided_batches,
)
from .harness import (
    BATCH_SIZE_GRID,
    BIEXP_TRUTH,
    LEARNING_RATE_GRID,
    SAMPLE_COUNT_GRID,
    NllsResult,
    McmcResult,
    PosteriorScenario,
    PriorScenario,
    SimulationSpec,
    SweepResult,
    SweepSpec,
    make_init,
    make_prior,
    normalize_components,
    oracle_linear_conjugate,
    oracle_mcmc,
    oracle_nlls,
    run_init_study,
    run_sweep,
    simulate,
)
from .dataio import SeriesDataset, asl_differenced, expand_asl_times, load_dataset, save_dataset
from .cli import cli_main

__version__ = "0.1.0"
