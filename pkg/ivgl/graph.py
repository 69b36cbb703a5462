# ivgl / Copyright Consortium Érudit <tech@erudit.org> / MIT License

"""
Predictor networks and their Laplacian matrices.

Nodes are numbered from 0 in the python API. Files use 1-based indices, see
``ivgl.io``.
"""

import logging

from collections import deque
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from scipy import linalg
from scipy.spatial.distance import pdist, squareform

from ivgl.exceptions import InvalidGraphError, InvalidInputError


logger = logging.getLogger("ivgl.graph")

NORMALIZED = "normalized"
UNNORMALIZED = "unnormalized"
LAPLACIAN_KINDS = (NORMALIZED, UNNORMALIZED)

# Eigenvalues in [-EIGEN_CLAMP, 0) are rounding noise and are set to 0
EIGEN_CLAMP = 1e-12


@dataclass(frozen=True)
class Graph:
    """
    A weighted undirected graph over ``p`` nodes, without self-loops.
    Edges are stored sorted, as ``(j, k, weight)`` with ``j < k``.
    """

    p: int
    edges: tuple = ()

    def __post_init__(self):
        if self.p < 1:
            raise InvalidGraphError("A graph needs at least one node, got p=%r" % self.p)
        seen = set()
        for j, k, weight in self.edges:
            if j == k:
                raise InvalidGraphError("Self-loop on node %d" % j)
            if not j < k:
                raise InvalidGraphError("Edge (%d, %d) is not stored with j < k" % (j, k))
            if j < 0 or k >= self.p:
                raise InvalidGraphError("Edge (%d, %d) out of range for p=%d" % (j, k, self.p))
            if not np.isfinite(weight) or weight < 0:
                raise InvalidGraphError("Edge (%d, %d) has invalid weight %r" % (j, k, weight))
            if (j, k) in seen:
                raise InvalidGraphError("Duplicate edge (%d, %d)" % (j, k))
            seen.add((j, k))

    @classmethod
    def from_edges(cls, p, edges):
        """
        Build a graph from ``(j, k)`` or ``(j, k, weight)`` tuples in any
        orientation and order (weight defaults to 1).
        """
        normalized = []
        for edge in edges:
            j, k = int(edge[0]), int(edge[1])
            weight = float(edge[2]) if len(edge) > 2 else 1.0
            normalized.append((min(j, k), max(j, k), weight))
        return cls(p=int(p), edges=tuple(sorted(normalized)))

    @cached_property
    def adjacency(self):
        """Dense, symmetric ``p x p`` weight matrix."""
        matrix = np.zeros((self.p, self.p))
        for j, k, weight in self.edges:
            matrix[j, k] = matrix[k, j] = weight
        matrix.setflags(write=False)
        return matrix

    @cached_property
    def degrees(self):
        degrees = self.adjacency.sum(axis=1)
        degrees.setflags(write=False)
        return degrees

    @cached_property
    def neighbors(self):
        """Neighbors of each node, in ascending index order."""
        result = [[] for _ in range(self.p)]
        for j, k, _weight in self.edges:
            result[j].append(k)
            result[k].append(j)
        return tuple(tuple(sorted(nodes)) for nodes in result)

    @property
    def isolated_nodes(self):
        return tuple(int(j) for j in np.flatnonzero(self.degrees == 0))

    def relabel(self, permutation):
        """
        Return the same graph with node ``j`` renamed ``permutation[j]``.
        """
        permutation = np.asarray(permutation)
        if sorted(permutation.tolist()) != list(range(self.p)):
            raise InvalidInputError("Not a permutation of range(%d)" % self.p)
        return Graph.from_edges(
            self.p, [(permutation[j], permutation[k], w) for j, k, w in self.edges]
        )


@dataclass(frozen=True)
class Laplacian:
    """
    A graph Laplacian with a square-root factor ``S`` such that ``S.T @ S``
    equals ``matrix``. ``S`` has one row per nonzero eigenvalue.
    """

    kind: str
    matrix: np.ndarray
    sqrt_factor: np.ndarray

    @property
    def p(self):
        return self.matrix.shape[0]

    @property
    def rank(self):
        return self.sqrt_factor.shape[0]

    def quadratic_form(self, beta):
        beta = np.asarray(beta, dtype=float)
        return float(beta @ self.matrix @ beta)

    def eigenvalue_range(self):
        eigenvalues = linalg.eigvalsh(self.matrix)
        return float(eigenvalues[0]), float(eigenvalues[-1])

    def submatrix(self, rows, columns):
        return self.matrix[np.ix_(rows, columns)]


def build_ring(p):
    """Cycle graph with unit weights: ``(j, j+1)`` plus the closing ``(0, p-1)``."""
    if p < 3:
        raise InvalidGraphError("A ring needs at least 3 nodes, got p=%r" % p)
    edges = [(j, j + 1, 1.0) for j in range(p - 1)]
    edges.append((0, p - 1, 1.0))
    return Graph.from_edges(p, edges)


def build_distance_graph(coords, threshold):
    """
    Unit-weight edge between each pair of rows of ``coords`` whose Euclidean
    distance is strictly less than ``threshold``.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[0] < 1:
        raise InvalidInputError("Coordinates must be a non-empty 2D array")
    if not np.all(np.isfinite(coords)):
        raise InvalidInputError("Coordinates contain non-finite values")
    if not threshold > 0:
        raise InvalidInputError("Distance threshold must be positive, got %r" % threshold)

    p = coords.shape[0]
    if p == 1:
        return Graph(p=1)
    distances = squareform(pdist(coords))
    rows, columns = np.nonzero(np.triu(distances < threshold, k=1))
    return Graph.from_edges(p, zip(rows.tolist(), columns.tolist()))


def sqrt_factor(matrix):
    """
    Return ``S`` with ``S.T @ S == matrix`` for a symmetric PSD ``matrix``,
    from its eigendecomposition. Rows for null eigenvalues are dropped.
    """
    eigenvalues, eigenvectors = linalg.eigh(matrix)
    if eigenvalues.size and eigenvalues[0] < -EIGEN_CLAMP * max(1.0, eigenvalues[-1]):
        raise InvalidGraphError(
            "Matrix is not positive semidefinite (smallest eigenvalue %r)" % eigenvalues[0]
        )
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    keep = eigenvalues > EIGEN_CLAMP
    return np.sqrt(eigenvalues[keep])[:, None] * eigenvectors[:, keep].T


def laplacian(graph, kind=NORMALIZED):
    """
    Laplacian of ``graph``.

    * ``normalized``: 1 on the diagonal of non-isolated nodes,
      ``-w_jk / sqrt(d_j d_k)`` between adjacent nodes, 0 elsewhere (so the
      rows and columns of isolated nodes are 0).
    * ``unnormalized``: ``D - A``.
    """
    if kind not in LAPLACIAN_KINDS:
        raise InvalidInputError(
            "Unknown Laplacian kind %r, expected one of %s" % (kind, ", ".join(LAPLACIAN_KINDS))
        )

    adjacency = graph.adjacency
    degrees = graph.degrees

    if kind == UNNORMALIZED:
        matrix = np.diag(degrees) - adjacency
    else:
        connected = degrees > 0
        inv_sqrt = np.zeros(graph.p)
        inv_sqrt[connected] = 1.0 / np.sqrt(degrees[connected])
        matrix = np.diag(connected.astype(float)) - inv_sqrt[:, None] * adjacency * inv_sqrt
    matrix = (matrix + matrix.T) / 2

    if graph.isolated_nodes:
        logger.debug("Graph has isolated nodes: %s", graph.isolated_nodes)

    factor = sqrt_factor(matrix)
    matrix.setflags(write=False)
    factor.setflags(write=False)
    return Laplacian(kind=kind, matrix=matrix, sqrt_factor=factor)


def contiguous_cluster(graph, seed_node, size, rng=None):
    """
    Grow a set of ``size`` nodes by breadth-first expansion from
    ``seed_node``, visiting neighbors in ascending index order.

    If ``seed_node`` is None it is drawn uniformly with ``rng``. When the seed's
    component is too small, the remaining slots go to the unused nodes closest
    to the seed by index (ties to the lower index).

    Nodes are returned in the order they were added.
    """
    if not 1 <= size <= graph.p:
        raise InvalidInputError("Cluster size must be in [1, %d], got %r" % (graph.p, size))
    if seed_node is None:
        if rng is None:
            raise InvalidInputError("A random generator is needed to draw the seed node")
        seed_node = int(rng.integers(graph.p))
    if not 0 <= seed_node < graph.p:
        raise InvalidInputError("Seed node %r does not exist" % seed_node)

    cluster = [seed_node]
    visited = {seed_node}
    queue = deque([seed_node])
    while queue and len(cluster) < size:
        node = queue.popleft()
        for neighbor in graph.neighbors[node]:
            if neighbor in visited:
                continue
            visited.add(neighbor)
            cluster.append(neighbor)
            queue.append(neighbor)
            if len(cluster) == size:
                break

    if len(cluster) < size:
        remaining = sorted(
            (node for node in range(graph.p) if node not in visited),
            key=lambda node: (abs(node - seed_node), node),
        )
        cluster.extend(remaining[: size - len(cluster)])

    return tuple(cluster)
