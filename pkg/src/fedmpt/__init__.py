"""Desk-scale simulator of federated multi-label prompt tuning with condition prompts."""

__version__ = "0.1.0"
