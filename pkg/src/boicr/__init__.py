"""Weakly supervised detection by online refinement of instance classifiers."""

__version__ = "0.1.0"
