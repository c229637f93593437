"""Nonparametric offline option discovery with a relaxed variational objective."""

__version__ = "0.1.0"
