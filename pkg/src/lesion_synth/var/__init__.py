from .estimator import MEASUREMENT_MODES, NextScaleVAR, next_scale_loss
from .model import NextScaleTransformer, block_causal_bias
from .sampling import filter_logits, sample_tokens
from .sequence import ScaleSequence, flatten_pyramid, unflatten_sequence
from .synthesis import LesionSynthesizer

__all__ = [
    "LesionSynthesizer", "MEASUREMENT_MODES", "NextScaleTransformer", "NextScaleVAR",
    "ScaleSequence", "block_causal_bias", "filter_logits", "flatten_pyramid", "next_scale_loss",
    "sample_tokens", "unflatten_sequence",
]
