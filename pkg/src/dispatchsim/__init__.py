"""Simulator and policy toolkit for ultra-fast single-depot order dispatching."""

__version__ = "0.1.0"
