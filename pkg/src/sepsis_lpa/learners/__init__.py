"""Imbalance-aware tree ensembles: SMOTE, CART, random forests, boosting and tuning."""
from .ensemble import (GBM_DEFAULTS, RF_DEFAULTS, ConfigError, ImportanceTable, TrainedEnsemble,
                       fit_gbm, fit_rf, variable_importance)
from .smote import SmoteConfig, SmoteResult, balance_amount, oversample, smote
from .tree import Tree, grow_tree
from .tuning import (GBM_GRID, RF_GRID, CVResult, cv_tune, expand_grid, stratified_folds,
                     train_test_split)

__all__ = [
    "SmoteConfig", "SmoteResult", "smote", "oversample", "balance_amount", "Tree", "grow_tree",
    "TrainedEnsemble", "ImportanceTable", "ConfigError", "fit_rf", "fit_gbm", "variable_importance",
    "GBM_DEFAULTS", "RF_DEFAULTS", "GBM_GRID", "RF_GRID", "CVResult", "cv_tune", "expand_grid",
    "stratified_folds", "train_test_split",
]
