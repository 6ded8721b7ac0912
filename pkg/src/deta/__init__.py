"""Dual-branch graph encoder with two-level domain alignment for discrete-time survival prediction."""

__version__ = "0.1.0"
