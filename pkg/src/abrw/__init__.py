"""Annihilating branching random walks on the integer lattice."""

__version__ = "0.1.0"
