"""Counterfactual explainable recommendation over a collaborative knowledge graph."""

__version__ = "0.1.0"
