"""Depth and skeleton dynamic hand gesture recognition with CNN+LSTM networks and their fusion."""

__version__ = "0.1.0"
