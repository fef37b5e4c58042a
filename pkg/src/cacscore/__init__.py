"""Coronary calcium scoring on CT: reference Agatston scorer, phantoms and a ConvNet regressor."""

__version__ = "0.1.0"

from .ctvol import BoundingBox, CtVolume, load_volume, save_volume, validate_for_scoring  # noqa: E402
from .refscore import ScoreReport, agatston_score, extract_lesions, risk_category, score_volume  # noqa: E402

__all__ = [
    "BoundingBox",
    "CtVolume",
    "ScoreReport",
    "__version__",
    "agatston_score",
    "extract_lesions",
    "load_volume",
    "risk_category",
    "save_volume",
    "score_volume",
    "validate_for_scoring",
]
