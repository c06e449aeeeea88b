"""Controllable skin lesion synthesis with a lesion-focused multi-scale tokenizer and next-scale autoregression."""
__version__ = "0.1.0"
