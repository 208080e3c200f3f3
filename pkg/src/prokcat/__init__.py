"""Enzyme turnover-rate prediction: encoders, interaction attention, MLP and KAN heads."""

__version__ = "0.1.0"
