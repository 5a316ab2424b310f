"""Desk-scale camouflaged-object-detection stack.

Layers: a rank-4 float64 tensor core with explicit-graph reverse-mode
differentiation, the context-aware cross-level fusion network built on it,
a weighted structure loss, the five standard segmentation metrics, a
deterministic synthetic-camouflage data generator, and a training loop.
"""

from .blocks import C2FNet
from .tensor import Graph, Tensor, backward

__all__ = ["C2FNet", "Graph", "Tensor", "backward"]
__version__ = "0.1.0"
