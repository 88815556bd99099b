"""spolab: DPO, SPO and squared-target preference losses with exact gradients and closed-form oracles."""

__version__ = "0.1.0"

from .core import (
    DEFAULT_LOG_FLOOR,
    LogProbTable,
    MissingEntryError,
    NumericDomainError,
    PreferencePair,
    logits_diff,
    pair_probs,
)
from .losses import (
    LossEval,
    LossKind,
    LossOverflowError,
    LossSpec,
    eval_dpo,
    eval_spo,
    eval_squared_target,
    evaluate,
    grad_wrt_pi_l,
    grad_wrt_pi_w,
)
from .policy import LinearFeaturePolicy, ReferencePolicy, TabularPolicy
from .oracle import RewardModel, kl_divergence, optimal_policy, optimality_residuals, rlhf_objective
from .datagen import InstanceSpec, PreferenceDataset, gen_instance, sample_preferences
from .trainer import RunRecord, TrainConfig, adam_step, train
