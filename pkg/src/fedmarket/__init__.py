"""Federated-learning model marketplace simulator with Shapley-value payouts."""

__version__ = "0.1.0"
