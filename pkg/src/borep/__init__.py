"""Stochastic bilevel optimization under relaxed smoothness.

Normalized-momentum upper-level updates with initialization-refined,
periodically-updated lower-level variables; single-loop baselines; analytic
synthetic problems; and diagnostics that verify the method's guarantees
empirically.
"""

from .core import (
    BorepError,
    DerivedConstants,
    MissingAnalyticLayer,
    NonFiniteStateError,
    ProblemConstants,
    RngToken,
    STREAMS,
    StochasticBilevelProblem,
    derive_constants,
    derive_k0_k1,
    derive_lz_star,
    smoothness_radius,
)
from .lower import (
    EpochSgdSchedule,
    LowerUpdateConfig,
    build_epoch_schedule,
    epoch_entry,
    epoch_lambda,
    epoch_schedule,
    epoch_sgd,
    estimate_v0,
    k_dagger_for,
    practical_epoch_schedule,
    project_ball,
    tracking_gamma,
    tracking_lambda,
    tracking_n,
    update_lower,
)
from .solver import (
    BorepConfig,
    ScheduleInput,
    SolverState,
    TrackingStats,
    hypergrad_estimate,
    normalized_step,
    practical_config,
    run_borep,
    run_tracking_ensemble,
    theory_schedule,
    update_momentum,
    update_z,
)
from .baselines import SobaConfig, run_ma_soba, run_soba
from .problems import (
    Dataset,
    HyperCleanProblem,
    HyperOptProblem,
    NoiseSpec,
    QuadraticBilevel,
    from_json,
    gen_synthetic_dataset,
    identity_fixture,
    make_hyperclean,
    make_hyperopt,
    make_quadratic,
    make_quartic_upper,
)
from .diagnostics import (
    GradCheckReport,
    LemmaReport,
    LineFit,
    SmoothnessScatter,
    check_hypergrad,
    collect_x_trajectory,
    estimate_smoothness,
    finite_diff_grad,
    fit_line,
    lemma4_bias_bound,
    mc_hypergrad_mean,
    verify_lemma_ensemble,
)
from .trace import CSV_COLUMNS, RunTrace, TraceRecord, read_csv, write_csv

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
