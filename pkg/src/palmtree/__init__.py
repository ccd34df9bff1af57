"""Partially additive (generalized) linear model trees.

Model-based recursive partitioning where some regressors get
subgroup-specific coefficients and others a single global coefficient.
"""

from .data import Dataset, RoleSpec, SchemaError, categorical, design_matrix, numeric, read_csv, write_csv
from .glm import (
    DegeneratePartitionError,
    FitResult,
    SingularDesignError,
    fit_glm,
    fit_interaction_glm,
    get_family,
    predict,
)
from .fluctuation import decorrelate_scores, select_split_variable, suplm_ordered, chisq_categorical
from .metrics import adjusted_rand_index, count_subgroups, regime_accuracy, treatment_mae, type1_rate
from .mob import ModelTree, TreeControl, find_split_point, grow_tree, predict_partition, predict_response
from .palm import PalmControl, PalmModel, fit_palm, predict_palm, treatment_effects
from .otr import fit_otr, fit_outcome_model, fit_weighted_cart, otr_regime, predicted_benefit
from .suplm_dist import suplm_pvalue

__version__ = "0.1.0"

__all__ = [
    "Dataset", "RoleSpec", "SchemaError", "categorical", "design_matrix", "numeric", "read_csv", "write_csv",
    "DegeneratePartitionError", "FitResult", "SingularDesignError", "fit_glm", "fit_interaction_glm",
    "get_family", "predict", "decorrelate_scores", "select_split_variable", "suplm_ordered",
    "chisq_categorical", "adjusted_rand_index", "count_subgroups", "regime_accuracy", "treatment_mae",
    "type1_rate", "ModelTree", "TreeControl", "find_split_point", "grow_tree", "predict_partition",
    "predict_response", "PalmControl", "PalmModel", "fit_palm", "predict_palm", "treatment_effects",
    "fit_otr", "fit_outcome_model", "fit_weighted_cart", "otr_regime", "predicted_benefit", "suplm_pvalue",
]
