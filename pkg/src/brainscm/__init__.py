"""Structural causal model engine for counterfactual brain-image synthesis."""

__version__ = "0.1.0"
