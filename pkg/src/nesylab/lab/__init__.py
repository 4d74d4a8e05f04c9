"""Training harness, trajectory analysis and verification suites."""

from .analysis import (
    AggregateTrajectory,
    BiasReport,
    aggregate_experiment,
    aggregate_runs,
    apply_ranking,
    detect_deterministic_bias,
    rank_ds_outputs,
)
from .checks import CheckReport, gradient_check, sl_ds_equivalence_check, wmc_oracle_check, wta_step_check
from .training import RunConfig, Trajectory, TrainingDiverged, run_experiment, train_run

__all__ = [
    "AggregateTrajectory",
    "BiasReport",
    "CheckReport",
    "RunConfig",
    "TrainingDiverged",
    "Trajectory",
    "aggregate_experiment",
    "aggregate_runs",
    "apply_ranking",
    "detect_deterministic_bias",
    "gradient_check",
    "rank_ds_outputs",
    "run_experiment",
    "sl_ds_equivalence_check",
    "train_run",
    "wmc_oracle_check",
    "wta_step_check",
]
