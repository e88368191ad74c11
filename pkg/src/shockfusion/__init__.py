"""Shock-aware operator networks for parametric fields with moving discontinuities.

The package reads and writes structured Tecplot point files, generates
viscous Burgers reference data, builds shock-aligned trunk features, and
trains a branch/trunk network with Hadamard fusion in plain numpy.
"""

__version__ = "0.1.0"
