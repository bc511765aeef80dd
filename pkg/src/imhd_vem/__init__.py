"""Divergence-free virtual element solver for stationary inductionless MHD."""

__version__ = "0.1.0"
