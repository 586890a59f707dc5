"""Pruning-aware sparse regularization of BN scaling factors, built on numpy."""

__version__ = "0.1.0"
