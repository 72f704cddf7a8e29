"""Learnable channel permutations for N:M structured sparsity."""

__version__ = "0.1.0"
