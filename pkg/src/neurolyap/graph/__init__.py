"""Computation graphs, their derivatives and primitive relaxations."""
from .core import (
    GRAPH_FORMAT_VERSION,
    LEAKY_SLOPE,
    Graph,
    GraphBuilder,
    GraphError,
    Node,
    Trace,
    backward,
    effective_weight,
    forward,
    gram_matrix,
    quadform_matrix,
)
from .relax import interval_op, relax, relax_binary, relax_quadform, sin_range

__all__ = [
    "GRAPH_FORMAT_VERSION", "LEAKY_SLOPE", "Graph", "GraphBuilder", "GraphError", "Node", "Trace",
    "backward", "effective_weight", "forward", "gram_matrix", "quadform_matrix",
    "interval_op", "relax", "relax_binary", "relax_quadform", "sin_range",
]
