"""Predict the maximum one-shot magnitude-pruning ratio of a trained
network from its Hessian spectrum, and verify the prediction with a
built-in trainer, pruner, and Monte Carlo geometric oracles."""

__version__ = "0.1.0"

from . import geometry, nets, operators, pruning, spectral

__all__ = ["geometry", "nets", "operators", "pruning", "spectral", "__version__"]
