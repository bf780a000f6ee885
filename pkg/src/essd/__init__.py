"""Ensemble of simple study designs (ESSD) for signalling acute adverse drug reactions."""

__version__ = "0.1.0"
