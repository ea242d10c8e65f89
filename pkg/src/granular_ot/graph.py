"""Spatial adjacency between patches from their tiling-grid coordinates."""

from dataclasses import dataclass

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class SpatialGraph:
    """Undirected graph; edges are sorted (i, j) pairs with i < j.

    Self-loops are implied for every node and never stored.
    """

    num_nodes: int
    edges: tuple

    def degrees(self):
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def neighbor_table(self):
        """Padded neighbour lists with the node itself in column 0.

        Returns ``(index, mask)``, both of shape (num_nodes, 1 + max_degree).
        Padding slots point back at the node and are masked out.
        """
        nbrs = [[] for _ in range(self.num_nodes)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        width = 1 + max((len(x) for x in nbrs), default=0)
        index = np.tile(np.arange(self.num_nodes)[:, None], (1, width))
        mask = np.zeros((self.num_nodes, width), dtype=bool)
        mask[:, 0] = True
        for i, row in enumerate(nbrs):
            row = sorted(row)
            index[i, 1 : 1 + len(row)] = row
            mask[i, 1 : 1 + len(row)] = True
        return index, mask


def _coords(coords):
    c = np.asarray(coords)
    if c.ndim != 2 or c.shape[1] != 2:
        raise InputError(f"coordinates must have shape (N, 2), got {c.shape}")
    if c.size and (c.min() < 0 or not np.all(c == np.round(c))):
        raise InputError("coordinates must be nonnegative integers")
    c = c.astype(np.int64)
    seen = {}
    for i, (r, col) in enumerate(map(tuple, c)):
        if (r, col) in seen:
            raise InputError(f"duplicate coordinate ({r}, {col}) at patches {seen[(r, col)]} and {i}")
        seen[(r, col)] = i
    return c, seen


def build_grid_graph(coords):
    """4-neighbour adjacency: an edge joins patches one step apart along one axis."""
    c, where = _coords(coords)
    edges = []
    for i, (r, col) in enumerate(map(tuple, c)):
        for nb in ((r + 1, col), (r, col + 1)):
            j = where.get(nb)
            if j is not None:
                edges.append((min(i, j), max(i, j)))
    return SpatialGraph(len(c), tuple(sorted(edges)))


def build_knn_graph(coords, k=4):
    """Symmetrized k-nearest-neighbour graph on Euclidean grid distance.

    Each node picks its ``k`` nearest others, ties going to the lower node
    id; the union of those directed choices gives the undirected edges.
    """
    c, _ = _coords(coords)
    n = len(c)
    if not 1 <= k < n:
        raise InputError(f"k must satisfy 1 <= k < num_nodes ({n}), got {k}")
    diff = c[:, None, :] - c[None, :, :]
    d2 = (diff * diff).sum(axis=-1)
    ids = np.arange(n)
    edges = set()
    for i in range(n):
        others = ids[ids != i]
        order = np.lexsort((others, d2[i, others]))
        for j in others[order[:k]]:
            edges.add((min(i, int(j)), max(i, int(j))))
    return SpatialGraph(n, tuple(sorted(edges)))
