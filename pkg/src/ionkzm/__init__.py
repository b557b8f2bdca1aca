"""Molecular dynamics and Kibble-Zurek analysis of trapped-ion Coulomb crystals."""

__version__ = "0.1.0"
