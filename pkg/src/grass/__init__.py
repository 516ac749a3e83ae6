"""Graph attention networks over randomly rewired graphs.

The package couples a sparse edge-attention architecture with structural
preprocessing: random regular rewiring sampled from permutations, random
walk probability encodings, and degree encodings. A click-based CLI drives
preprocessing, training, evaluation, and rewiring analysis.
"""

__version__ = "0.1.0"

from .errors import (
    CacheInvalidError,
    DataError,
    GrassError,
    NumericError,
    ValidationError,
)
from .graphs import (
    BatchedGraph,
    Graph,
    GraphDataset,
    Permutation,
    batch_graphs,
    build_graph,
    load_jsonl,
    permute_nodes,
    write_jsonl,
)

__all__ = [
    "BatchedGraph",
    "CacheInvalidError",
    "DataError",
    "Graph",
    "GraphDataset",
    "GrassError",
    "NumericError",
    "Permutation",
    "ValidationError",
    "batch_graphs",
    "build_graph",
    "load_jsonl",
    "permute_nodes",
    "write_jsonl",
    "__version__",
]
