"""Sample average approximation for risk-neutral PDE-constrained optimization."""

__version__ = "0.1.0"
