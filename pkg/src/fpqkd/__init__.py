"""Fully-passive decoy-state BB84 simulator."""

__version__ = "0.1.0"
