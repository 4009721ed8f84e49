"""Visual automated interpretability: explain features from max-activating
images and score the explanations by detection."""

from .backend import BackendConfig, HttpBackend, ImagePart, MockBackend, TextPart, make_backend
from .pipeline import (
    ActivationIndex, Example, FeatureRecord, FeatureSet, ImageStore, NeuronBaseline, RandomDirections,
    ScoreTable, collect_top_examples, detection_score, explain, histogram, run_pipeline,
    score_feature_set,
)
from .prompts import EXPLAINER_PROMPT, JUDGE_PROMPT, judge_prompt
from .render import render_overlay

__all__ = [
    "ActivationIndex", "BackendConfig", "EXPLAINER_PROMPT", "Example", "FeatureRecord", "FeatureSet",
    "HttpBackend", "ImagePart", "ImageStore", "JUDGE_PROMPT", "MockBackend", "NeuronBaseline", "RandomDirections",
    "ScoreTable", "TextPart", "collect_top_examples", "detection_score", "explain", "histogram",
    "judge_prompt", "make_backend", "render_overlay", "run_pipeline", "score_feature_set",
]
