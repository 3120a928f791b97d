"""Multimodal sentiment analysis over paired speech audio and transcripts."""

__version__ = "0.1.0"
