"""Empirically parameterized annotation-noise generator.

The generator is fitted from real multi-rater disagreement (``extraction``),
stored as a fully serializable parameter bundle (``model``) and replayed on
reference annotations under a strict stage hierarchy with magnitude control
(``generation``).
"""

from .extraction import ErrorCorpus, ExtractionError, extract_errors
from .model import (
    CategoryModel,
    NoiseModel,
    TopologyModel,
    UnmatchedModel,
    fit_noise_model,
    load_noise_model,
    load_proposals,
    load_similarity,
    save_noise_model,
)
from .generation import SynthesisResult, generate, generate_collaboration

__all__ = [
    "CategoryModel",
    "ErrorCorpus",
    "ExtractionError",
    "NoiseModel",
    "SynthesisResult",
    "TopologyModel",
    "UnmatchedModel",
    "extract_errors",
    "fit_noise_model",
    "generate",
    "generate_collaboration",
    "load_noise_model",
    "load_proposals",
    "load_similarity",
    "save_noise_model",
]
