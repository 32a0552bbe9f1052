"""Coordinated checkpoint-restart over a simulated RC/UD fabric."""

__version__ = "0.1.0"
