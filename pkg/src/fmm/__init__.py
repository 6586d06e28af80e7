"""Faithfulness-measurable masked classifier toolkit."""

__version__ = "0.1.0"
