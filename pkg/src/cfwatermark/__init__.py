"""Watermarking counterfactual explanations against model extraction."""
