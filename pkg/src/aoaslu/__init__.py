"""Generative multi-intent spoken language understanding with attention-over-attention decoding."""

from .errors import AoASLUError
from .grammar import LabelVocabulary, Span, TargetSequence, Utterance, decode_target, encode_target
from .model import ModelConfig, init_params
from .tensor import GradientTape, Tensor

__version__ = "0.1.0"

__all__ = [
    "AoASLUError", "GradientTape", "LabelVocabulary", "ModelConfig", "Span", "TargetSequence",
    "Tensor", "Utterance", "decode_target", "encode_target", "init_params",
]
