"""Deterministic multi-agent simulator for cooperative VRU perception and
intention detection."""

__version__ = "0.1.0"
