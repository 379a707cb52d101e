"""Private three-player GAN training with a Gaussian-DP budget."""

from .accountant import (
    BudgetLedger,
    GdpBudget,
    PrivacyParams,
    compose,
    epsilon_to_mu,
    gnmax_mu,
    mu_to_delta,
    mu_to_epsilon,
    subsampled_mu,
    total_mu,
)
from .data import Dataset, load_csv, load_idx, split, synth_mixture
from .trainer import TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "BudgetLedger", "GdpBudget", "PrivacyParams", "compose", "epsilon_to_mu", "gnmax_mu", "mu_to_delta",
    "mu_to_epsilon", "subsampled_mu", "total_mu", "Dataset", "load_csv", "load_idx", "split", "synth_mixture",
    "TrainConfig", "Trainer", "train",
]
