"""Traffic sign interpretation toolkit: scene annotations, shrink-mask geometry,
detection/recognition evaluation, rule-based interpretation and text metrics."""

__version__ = "0.1.0"

from .scene import (Corpus, DescriptionAnnotation, PanelAnnotation, QuadBox, SceneRecord,
                    SymbolAnnotation, TextAnnotation, parse_scene, serialize_scene, split_corpus,
                    validate_scene)
from .interpreter import Grammar, default_grammar, interpret_scene
from .textmetrics import SlotRules, extract_frame, score_corpus, soft_accuracy
from .synth import GeneratorConfig, NoiseProfile, generate_corpus, perturb_predictions

__all__ = [
    "Corpus", "DescriptionAnnotation", "PanelAnnotation", "QuadBox", "SceneRecord",
    "SymbolAnnotation", "TextAnnotation", "parse_scene", "serialize_scene", "split_corpus",
    "validate_scene", "Grammar", "default_grammar", "interpret_scene", "SlotRules", "extract_frame",
    "score_corpus", "soft_accuracy", "GeneratorConfig", "NoiseProfile", "generate_corpus",
    "perturb_predictions",
]
