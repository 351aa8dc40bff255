"""kalos: inter-annotator agreement for instance-based vision annotations.

Pipeline: calibrate a localization distance and threshold from the data,
resolve cross-rater correspondence into disjoint units, build nominal
reliability matrices under the completeness assumption, and score with
Krippendorff's alpha. Ships a diagnostics toolkit, an empirically
parameterized noise generator, and a validation harness for solver and
cost-function properties.
"""

__version__ = "0.1.0"

from .dataset import Dataset, DatasetError, parse_dataset, serialize_dataset, validate_dataset
from .distances import distance, similarity
from .estimators import AgreementScorer, Calibrator, NoiseModelFitter
from .pipeline import PipelineConfig, score_dataset
from .reliability import krippendorff_alpha

__all__ = [
    "AgreementScorer",
    "Calibrator",
    "Dataset",
    "DatasetError",
    "NoiseModelFitter",
    "PipelineConfig",
    "__version__",
    "distance",
    "krippendorff_alpha",
    "parse_dataset",
    "score_dataset",
    "serialize_dataset",
    "similarity",
    "validate_dataset",
]
