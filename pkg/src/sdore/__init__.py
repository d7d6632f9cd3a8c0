"""Gradient-penalized deep regression with ReQU networks.

Fits least squares plus a squared-gradient-norm penalty (estimated on
unlabeled data, a user-supplied point set, or the pooled covariates), then
uses the fitted network for plug-in derivative estimation, variable
selection, and elliptic inverse-source recovery.
"""

__version__ = "0.1.0"

from .autodiff import Jet, Tape, backward, forward_jet, requ, requ_prime, requ_second
from .errors import (CapabilityError, CheckpointError, ConfigError,
                     ContractViolation)
from .estimators import (SelectionResult, SourceRecovery, ThresholdRule,
                         derivative_norms, recover_source, rel_l2_error,
                         select_variables, selection_error)
from .experiments import (ExperimentReport, ExperimentResult, rate_slope,
                          ridge_oracle, run_experiment, run_experiment_def)
from .model import (Ensemble, ReQUNetwork, init_network, load_checkpoint,
                    predict, predict_jet, save_checkpoint)
from .problems import (EvalConfig, NetworkConfig, ProblemSpec, REGISTRY,
                       build_experiment, gen_appendix_sim, gen_appendix_toy,
                       gen_example_1d, gen_example_inverse,
                       gen_example_selection, load_csv_dataset)
from .training import (AdamState, LabeledSet, LossSpec, TrainConfig,
                       UnlabeledSet, Variant, adam_step, loss_dore, loss_ls,
                       loss_sdore, train)

__all__ = [
    "AdamState", "CapabilityError", "CheckpointError", "ConfigError",
    "ContractViolation", "Ensemble", "EvalConfig", "ExperimentReport",
    "ExperimentResult", "Jet", "LabeledSet", "LossSpec", "NetworkConfig",
    "ProblemSpec", "REGISTRY", "ReQUNetwork", "SelectionResult",
    "SourceRecovery", "Tape", "ThresholdRule", "TrainConfig", "UnlabeledSet",
    "Variant", "adam_step", "backward", "build_experiment",
    "derivative_norms", "forward_jet", "gen_appendix_sim", "gen_appendix_toy",
    "gen_example_1d", "gen_example_inverse", "gen_example_selection",
    "init_network", "load_checkpoint", "load_csv_dataset", "loss_dore",
    "loss_ls", "loss_sdore", "predict", "predict_jet", "rate_slope",
    "recover_source", "rel_l2_error", "requ", "requ_prime", "requ_second",
    "ridge_oracle", "run_experiment", "run_experiment_def", "save_checkpoint",
    "select_variables", "selection_error", "train",
]
