"""Temporal-pooling LSTM video captioning, implemented on numpy."""

__version__ = "0.1.0"
