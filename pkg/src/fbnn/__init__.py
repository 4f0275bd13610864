"""Feedback-corrected neural ODEs."""

__version__ = "0.1.0"
