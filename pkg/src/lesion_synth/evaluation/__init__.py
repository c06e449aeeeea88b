from .downstream import CONDITIONS, ConvClassifier, RecallReport, balance_with_synthetic, downstream_augment_eval
from .features import ClassifierFeatureExtractor, FrozenFeatureExtractor, export_features, write_feature_table
from .metrics import (FID_JITTER, FeatureSet, FidMatrix, compute_fid, compute_is, fid_confusion_matrix,
                      frechet_distance, inception_score)

__all__ = [
    "CONDITIONS", "ClassifierFeatureExtractor", "ConvClassifier", "FID_JITTER", "FeatureSet",
    "FidMatrix", "FrozenFeatureExtractor", "RecallReport", "balance_with_synthetic", "compute_fid",
    "compute_is", "downstream_augment_eval", "export_features", "fid_confusion_matrix",
    "frechet_distance", "inception_score", "write_feature_table",
]
