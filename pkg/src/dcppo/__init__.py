"""Offline pessimistic planning from dynamic discrete choice data."""

from .agent import BehaviorModel, ChoiceDataset, sample_dataset, solve_ddc
from .mdp import TabularLinearMdp, evaluate_policy, optimal_policy, random_instance, suboptimality
from .mle import EstimatedModel, MleConfig, fit_mle
from .planner import PessimisticPolicy, PlannerConfig, plan, uncertainty_violation_audit
from .reward import RecoveredReward, recover_reward

__version__ = "0.1.0"

__all__ = [
    "BehaviorModel",
    "ChoiceDataset",
    "EstimatedModel",
    "MleConfig",
    "PessimisticPolicy",
    "PlannerConfig",
    "RecoveredReward",
    "TabularLinearMdp",
    "evaluate_policy",
    "fit_mle",
    "optimal_policy",
    "plan",
    "random_instance",
    "recover_reward",
    "sample_dataset",
    "solve_ddc",
    "suboptimality",
    "uncertainty_violation_audit",
]
