"""Multi-feature concatenation and multi-classifier stacking for multi-site
tabular data: ComBat harmonization, kNN/QDA base learners stacked under a
gradient-boosted meta model, and exact tree Shapley explanations."""

from ._kernels import BACKEND
from .data import FeatureTable, concatenate_features, load_feature_table

__version__ = "0.1.0"

__all__ = ["BACKEND", "FeatureTable", "concatenate_features", "load_feature_table"]
