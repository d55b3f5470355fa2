"""Prompt-based evaluation of clinical notes and 48-hour vital-sign series
with chat-completion models."""

__version__ = "0.1.0"
