"""Robust Parkinson's-disease detection from speech.

A backbone-agnostic classifier head (layer-weighted sum, attention pooling,
MLP, sigmoid) trained end-to-end under speaker-independent cross-validation,
with a test-time speech-enhancement pipeline and probability-averaging model
fusion. Verified at desk scale with a deterministic toy backbone and
synthetic corpora.
"""

__version__ = "0.1.0"
