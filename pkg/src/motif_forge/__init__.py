"""Contextual motif discovery for uniformly sampled physiological signals."""

__version__ = "0.1.0"
