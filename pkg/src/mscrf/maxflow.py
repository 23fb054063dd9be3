"""Minimum s-t cut on integer-capacity graphs.

Thin wrapper over scipy's push-relabel maximum flow.  Capacities must be
non-negative integers that fit in int32: scipy converts larger values
silently and the cut would be wrong, so this module enforces the bound.
After the flow is computed the source side of the minimum cut is the set
of nodes reachable from the source in the residual graph.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, maximum_flow

#: Largest capacity accepted (int32 with headroom for scipy internals).
MAX_CAPACITY = np.int64(2**31 - 1)


def min_cut_source_side(
    n_nodes: int,
    tails: np.ndarray,
    heads: np.ndarray,
    capacities: np.ndarray,
    source: int,
    sink: int,
) -> np.ndarray:
    """Solve the min s-t cut and return the boolean source-side membership.

    Parameters
    ----------
    n_nodes : total node count (including source and sink).
    tails, heads : (E,) directed edge endpoints; parallel edges are summed.
    capacities : (E,) non-negative integer capacities, each < 2**31.
    source, sink : node indices.

    Returns
    -------
    (n_nodes,) bool array, True for nodes on the source side of the cut.
    """
    tails = np.asarray(tails, dtype=np.int64)
    heads = np.asarray(heads, dtype=np.int64)
    caps = np.asarray(capacities, dtype=np.int64)
    if not (tails.shape == heads.shape == caps.shape):
        raise ValueError("edge arrays must share one shape")
    if caps.size and (caps.min() < 0 or caps.max() > MAX_CAPACITY):
        raise OverflowError(
            "edge capacities must be non-negative and fit in int32; "
            f"got range [{caps.min()}, {caps.max()}]"
        )

    # Make sure every edge has a reverse twin in the sparsity pattern so
    # the residual graph below contains the back edges created by flow.
    all_tails = np.concatenate([tails, heads])
    all_heads = np.concatenate([heads, tails])
    all_caps = np.concatenate([caps, np.zeros_like(caps)])
    graph = coo_matrix(
        (all_caps, (all_tails, all_heads)), shape=(n_nodes, n_nodes)
    ).tocsr()
    if graph.nnz and graph.data.max() > MAX_CAPACITY:
        raise OverflowError("summed parallel-edge capacity exceeds int32")
    graph = graph.astype(np.int32)

    result = maximum_flow(graph, int(source), int(sink))

    residual = graph - result.flow
    residual.eliminate_zeros()
    if residual.nnz:
        reachable_nodes = breadth_first_order(
            residual, int(source), directed=True, return_predecessors=False
        )
    else:
        reachable_nodes = np.array([int(source)])
    side = np.zeros(n_nodes, dtype=bool)
    side[reachable_nodes] = True
    return side
