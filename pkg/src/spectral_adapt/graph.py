"""Undirected graphs, symmetric normalization with self-loops, homophily."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)


class GraphError(ValueError):
    """Malformed graph input (bad index, bad line, empty edge set...)."""


@dataclass(frozen=True)
class Graph:
    """Simple undirected graph.

    ``edges`` is an (E, 2) int64 array of unique pairs with ``u < v``, sorted
    lexicographically. Self-loops are never stored.
    """

    n: int
    edges: np.ndarray = field(repr=False)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    def degrees(self) -> np.ndarray:
        deg = np.bincount(self.edges[:, 0], minlength=self.n)
        deg += np.bincount(self.edges[:, 1], minlength=self.n)
        return deg

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency matrix, no diagonal."""
        u, v = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        data = np.ones(rows.shape[0], dtype=np.float64)
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))


@dataclass(frozen=True)
class LabeledGraph:
    graph: Graph
    labels: np.ndarray = field(repr=False)
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != (self.graph.n,):
            raise GraphError(
                f"expected {self.graph.n} labels, got {labels.shape[0]}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise GraphError(
                f"labels must lie in [0, {self.num_classes})")


@dataclass(frozen=True)
class NormalizedAdjacency:
    """D~^{-1/2} (A + I) D~^{-1/2} stored as a CSR matrix."""

    n: int
    matrix: sp.csr_matrix = field(repr=False)
    degrees: np.ndarray = field(repr=False)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def perron_vector(self) -> np.ndarray:
        v = np.sqrt(1.0 + self.degrees)
        return v / np.linalg.norm(v)


def build_undirected(edge_list, n: int) -> Graph:
    """Symmetrize, deduplicate and drop self-loops from ``edge_list``."""
    n = int(n)
    if n < 0:
        raise GraphError(f"node count must be nonnegative, got {n}")
    arr = np.asarray(edge_list, dtype=np.int64).reshape(-1, 2)
    if arr.size:
        bad = np.flatnonzero((arr < 0).any(axis=1) | (arr >= n).any(axis=1))
        if bad.size:
            i = int(bad[0])
            raise GraphError(
                f"edge {i} ({arr[i, 0]}, {arr[i, 1]}) has an index outside [0, {n})")
    loops = arr[:, 0] == arr[:, 1]
    kept = np.sort(arr[~loops], axis=1)
    kept = np.unique(kept, axis=0) if kept.size else kept.reshape(0, 2)
    dropped = arr.shape[0] - kept.shape[0]
    if dropped:
        logger.info("dropped %d self-loop/duplicate entries (%d self-loops)",
                    dropped, int(loops.sum()))
    return Graph(n=n, edges=np.ascontiguousarray(kept, dtype=np.int64))


def read_edges(path, n: int) -> Graph:
    """Parse an ``edges.tsv`` file (``u<TAB>v`` per line, ``#`` comments)."""
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise GraphError(f"{path}:{lineno}: expected 'u<TAB>v', got {line!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphError(f"{path}:{lineno}: non-integer node id in {line!r}") from None
            if not (0 <= u < n and 0 <= v < n):
                raise GraphError(f"{path}:{lineno}: node id out of range [0, {n}) in {line!r}")
            pairs.append((u, v))
    return build_undirected(pairs, n)


def write_edges(graph: Graph, path) -> None:
    with open(Path(path), "w") as fh:
        for u, v in graph.edges:
            fh.write(f"{u}\t{v}\n")


def sym_normalize(graph: Graph) -> NormalizedAdjacency:
    """Renormalized adjacency with self-loops; isolated nodes map to 1."""
    deg = graph.degrees().astype(np.float64)
    a_hat = graph.adjacency() + sp.identity(graph.n, format="csr")
    scale = sp.diags(1.0 / np.sqrt(1.0 + deg))
    mat = (scale @ a_hat @ scale).tocsr()
    mat.sort_indices()
    return NormalizedAdjacency(n=graph.n, matrix=mat, degrees=deg)


def homophily_score(lg: LabeledGraph) -> float:
    """Fraction of undirected edges whose endpoints share a label."""
    edges = lg.graph.edges
    if edges.shape[0] == 0:
        raise GraphError("homophily is undefined on an edgeless graph")
    y = np.asarray(lg.labels)
    return float(np.mean(y[edges[:, 0]] == y[edges[:, 1]]))
