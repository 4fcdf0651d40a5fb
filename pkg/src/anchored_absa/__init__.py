"""Unsupervised aspect extraction for restaurant reviews, with prior-label anchoring."""

__version__ = "0.1.0"
