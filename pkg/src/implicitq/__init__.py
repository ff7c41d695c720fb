"""Implicit Q-value learning: exact regularized DP and a from-scratch deep agent."""

__version__ = "0.1.0"
