"""Doubly-robust off-policy evaluation with an estimated logging policy."""
from .core import Context, Dataset, StepRecord, Trajectory, cumulative_importance_ratio, discounted_return, validate_dataset
from .envs import (
    SyntheticCB,
    SyntheticCBConfig,
    TabularMDP,
    classification_to_bandit,
    gen_synthetic_cb,
    modelfail,
    modelwin,
    read_dataset,
    rollout,
    true_value_dp,
    write_dataset,
)
from .errors import OPEError
from .estimators import (
    EstimateReport,
    dm_estimate,
    dr_estimate,
    drunknown_estimate,
    influence_values,
    ipw_estimate,
    mlipw_estimate,
    mrdr_estimate,
    solve_estimating_equation,
    variance_and_ci,
)
from .harness import ExperimentConfig, ExperimentReport, emit_report, load_config, run_experiment
from .policies import MixturePolicy, SoftmaxLinearPolicy, fit_general, fit_mle
from .value_models import ConstantFeatures, LinearFeatures, TimeAugmentedFeatures

__version__ = "0.1.0"
