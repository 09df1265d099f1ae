"""Replicated, failure-atomic persistent data structures over a coupled log."""

__version__ = "0.1.0"
