"""Density-dilated difference graph convolution for point-cloud classification."""

__version__ = "0.1.0"

from .core import InvalidInputError, SparseGraph, graph_from_rows
from .grouping import (DilationField, KdTree, ball_query, dilated_ball_query, kernel_density,
                       knn_query)
from .attention import masked_attention_adjacency
from .conv import DiffConvLayer, diffconv_basic, diffconv_full, edgeconv_reference
from .network import DiffConvNet, NetworkConfig, RunConfig, evaluate, load_config, train_loop

__all__ = [
    "InvalidInputError", "SparseGraph", "graph_from_rows", "DilationField", "KdTree",
    "ball_query", "dilated_ball_query", "kernel_density", "knn_query",
    "masked_attention_adjacency", "DiffConvLayer", "diffconv_basic", "diffconv_full",
    "edgeconv_reference", "DiffConvNet", "NetworkConfig", "RunConfig", "evaluate",
    "load_config", "train_loop",
]
