"""Periodic homogenization of a nonlocal semilinear elasticity model and its optimal control."""
__version__ = "0.1.0"
