"""Localisation, slice preparation, regression training and prediction."""

from .locator import HeartLocator, LocalizationError, SliceClassifier, box_from_probabilities, locate_heart
from .regressor import EXPERIMENTS, CalciumRegressor
from .saliency import saliency_maps
from .slices import inverse_log_transform, log_transform, prepare_slices
from .train import ExperimentVariant, LocatorConfig, TrainConfig, predict_subject, train_locator, train_regressor

__all__ = [
    "EXPERIMENTS",
    "CalciumRegressor",
    "ExperimentVariant",
    "HeartLocator",
    "LocalizationError",
    "LocatorConfig",
    "SliceClassifier",
    "TrainConfig",
    "box_from_probabilities",
    "inverse_log_transform",
    "locate_heart",
    "log_transform",
    "predict_subject",
    "prepare_slices",
    "saliency_maps",
    "train_locator",
    "train_regressor",
]
