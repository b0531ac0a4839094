"""Spine context model: shared slice encoder, attention pooling, and a small
transformer exchanging context across vertebrae and MR sequences."""

__version__ = "0.1.0"
