"""Double/debiased machine learning for policy relevant treatment effects.

Cross-fitted estimation of the effect of moving treatment propensities from a
status-quo policy to a counterfactual one, with kernel nuisance fits, a
Neyman-orthogonal score and sandwich standard errors.
"""

from .dgp import DgpParams, generate_sample, true_prte
from .estimator import EstimateResult, EstimationConfig, estimate
from .kernel_smoothing import Bandwidths
from .montecarlo import MCConfig, MCReport, run_replications
from .nuisance import Dataset, GeneralPShift, ProportionalShift, ZShift

__all__ = [
    "Bandwidths",
    "Dataset",
    "DgpParams",
    "EstimateResult",
    "EstimationConfig",
    "GeneralPShift",
    "MCConfig",
    "MCReport",
    "ProportionalShift",
    "ZShift",
    "estimate",
    "generate_sample",
    "run_replications",
    "true_prte",
]

__version__ = "0.1.0"
