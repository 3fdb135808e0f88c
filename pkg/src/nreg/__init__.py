"""Referring-expression generation: corpus pipeline, neural generator with
three attention variants, two non-neural baselines, and the evaluation
harness (string metrics, text metrics, paired significance tests)."""

__version__ = "0.1.0"
