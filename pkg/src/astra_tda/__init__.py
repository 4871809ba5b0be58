"""Training data attribution with preconditioned Neumann iHVP solvers."""

__version__ = "0.1.0"
