"""Particle solvers for infinite-horizon mean-field FBSDEs and the associated control problems."""
__version__ = "0.1.0"
