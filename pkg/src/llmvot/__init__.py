"""Value-of-travel-time experiments with language-model or synthetic respondents.

Submodules:

design       choice packages, cost rescaling, trade-off ratios, factorial grid
survey       prompt rendering and ranking-response parsing
respondents  synthetic Plackett-Luce respondent and remote chat-completion client
estimator    rank-ordered logit maximum likelihood and VOT
analysis     income-elasticity regressions, VOT-income curves, report files
pipeline     run manifests, resumable JSONL store, per-cell estimation
"""

from .design import (
    ChoicePackage,
    FactorGrid,
    ScenarioCell,
    average_tradeoff_ratio,
    builtin_packages,
    choice_setting_packages,
    factorial_cells,
    scale_costs,
)
from .estimator import Coefficients, FitResult, RankingObservation, fit, log_likelihood, vot_from
from .survey import parse_response, render_prompt

__version__ = "0.1.0"

__all__ = [
    "ChoicePackage",
    "Coefficients",
    "FactorGrid",
    "FitResult",
    "RankingObservation",
    "ScenarioCell",
    "average_tradeoff_ratio",
    "builtin_packages",
    "choice_setting_packages",
    "factorial_cells",
    "fit",
    "log_likelihood",
    "parse_response",
    "render_prompt",
    "scale_costs",
    "vot_from",
]
