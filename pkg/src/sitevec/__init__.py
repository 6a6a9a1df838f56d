"""Language-agnostic website classification and embedding from homepages."""

__version__ = "0.1.0"

from .dataset import CLASS_ORDER, class_vector_from_labels, is_homepage
from .embed import LAYOUT_V1, FeatureLayout, FeatureVector, StubEncoder, assemble
from .evaluate import PredictionSet, balanced_eval, calibrate, unbalanced_eval
from .extract import ExtractedPage, extract_page
from .model import ModelWeights, forward, init_weights, load_weights, save_weights
from .train import TrainConfig, class_priors

__all__ = [
    "CLASS_ORDER",
    "LAYOUT_V1",
    "ExtractedPage",
    "FeatureLayout",
    "FeatureVector",
    "ModelWeights",
    "PredictionSet",
    "StubEncoder",
    "TrainConfig",
    "assemble",
    "balanced_eval",
    "calibrate",
    "class_priors",
    "class_vector_from_labels",
    "extract_page",
    "forward",
    "init_weights",
    "is_homepage",
    "load_weights",
    "save_weights",
    "unbalanced_eval",
]
