"""Thermal two-phase reservoir simulation with two-stage CPR/CPTR preconditioning."""
__version__ = "0.1.0"
