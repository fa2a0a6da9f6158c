"""Federated adversarial unlearning simulator."""

__version__ = "0.1.0"
