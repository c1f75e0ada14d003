"""Feature-injection fusion, label-smoothing calibration and linguistic analysis."""

from .analysis import benjamini_hochberg, classification_metrics, linguistic_analysis, point_biserial
from .calibration import CalibrationConfig, PredictionSet, ace, ece, reliability_table
from .features import LexiconDictionary, goss, lexicon_features, load_dictionary, normalize_sum_to_one
from .fusion import FusionParams, fusion_backward, fusion_forward
from .gradcheck import gradient_check
from .model import SmoothingConfig, TrainConfig, smooth_targets, smoothed_cross_entropy, toy_forward, train

__version__ = "0.1.0"
