"""Survival modeling: Cox proportional hazards, random survival forest,
neural Cox, concordance evaluation, and corrected CV comparison."""

from .cox import (CoxModel, cox_risk, fit_coxph, neg_log_partial_likelihood,
                  partial_likelihood_grad_eta)
from .data import SurvivalDataset
from .evaluation import (concordance_index, corrected_paired_ttest, cv_scores,
                         kfold_cv)
from .forest import RsfModel, TreeNode, fit_rsf, rsf_risk
from .mlp import MlpSurvModel, fit_mlp_cox, mlp_loss_and_grads, mlp_risk
from .persist import FORMAT_VERSION, load_model, save_model

__all__ = [
    "SurvivalDataset",
    "CoxModel", "fit_coxph", "cox_risk", "neg_log_partial_likelihood",
    "partial_likelihood_grad_eta",
    "RsfModel", "TreeNode", "fit_rsf", "rsf_risk",
    "MlpSurvModel", "fit_mlp_cox", "mlp_risk", "mlp_loss_and_grads",
    "concordance_index", "corrected_paired_ttest", "kfold_cv", "cv_scores",
    "save_model", "load_model", "FORMAT_VERSION",
]
