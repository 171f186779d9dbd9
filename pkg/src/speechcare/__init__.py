"""Multimodal speech-based cognitive impairment screening at desk scale.

Acoustic, linguistic and demographic pathways fused by an adaptive gate,
with training, evaluation and fairness tooling around them.
"""

__version__ = "0.1.0"
