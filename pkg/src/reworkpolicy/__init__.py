"""Doubly robust effect estimation and policy learning for lot rework decisions."""

from .cate import CateFit, fit_cate, pointwise_band, predict_cate, uniform_band
from .data import (
    CsvSchema,
    DgpConfig,
    LotDataset,
    OracleTruth,
    assign_folds,
    exact_design,
    fit_pca,
    load_dataset,
    simulate_lots,
)
from .dml import (
    EffectEstimate,
    NuisancePredictions,
    ScoreElements,
    aipw_scores,
    crossfit_nuisances,
    estimate_ate,
    estimate_atte,
    orthogonality_check,
)
from .learners import LearnerSpec
from .policy import (
    ThresholdPolicy,
    TreePolicy,
    evaluate_policy,
    exact_policy_tree,
    greedy_policy_tree,
    threshold_policy,
)
from .splines import BasisSpec, build_basis

__version__ = "0.1.0"
