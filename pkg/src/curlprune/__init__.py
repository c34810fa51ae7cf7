"""Residual-aware channel pruning with KL importance and limited-data distillation."""
__version__ = "0.1.0"
