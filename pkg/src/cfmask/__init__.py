"""Embedded feature selection with a learned feature mask and its complement.

A small numpy-only neural-network stack trains an attention mask over the
input features.  The features it scores low are pushed, through a second
path fed by the complementary mask, towards predicting random labels.
"""

from .datasets import Dataset, load_csv, load_idx, make_madelon_like, normalize, split
from .masks import AttentionMaskNet, MaskPair, VectorMask, full_dataset_mask, mask_alt_design
from .model import CfmModel, TrainingConfig, fit_method, train
from .selection import ExtraTrees, evaluate_sweep, knn_classify, rank_features, top_k
from .tensor import Rng, ShapeError

__all__ = [
    "Dataset", "load_csv", "load_idx", "make_madelon_like", "normalize", "split",
    "AttentionMaskNet", "MaskPair", "VectorMask", "full_dataset_mask", "mask_alt_design",
    "CfmModel", "TrainingConfig", "fit_method", "train",
    "ExtraTrees", "evaluate_sweep", "knn_classify", "rank_features", "top_k",
    "Rng", "ShapeError",
]
__version__ = "0.1.0"
