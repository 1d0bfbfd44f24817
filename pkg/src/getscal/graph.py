"""Graph containers, CSR storage and the self-loop normalized adjacency."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    """Raised when graph inputs violate index or shape constraints."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    num_rows: int
    num_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        offs = np.asarray(self.row_offsets, dtype=np.int64)
        cols = np.asarray(self.col_indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        if offs.shape != (self.num_rows + 1,) or offs[0] != 0:
            raise GraphError("row_offsets must have length num_rows+1 and start at 0")
        if np.any(np.diff(offs) < 0):
            raise GraphError("row_offsets must be non-decreasing")
        if offs[-1] != len(cols) or len(cols) != len(vals):
            raise GraphError("last row offset must equal the number of stored entries")
        if len(cols) and (cols.min() < 0 or cols.max() >= self.num_cols):
            raise GraphError("column index out of range")
        if len(cols) > 1:
            rows = np.repeat(np.arange(self.num_rows), np.diff(offs))
            same_row = rows[1:] == rows[:-1]
            bad = np.flatnonzero(same_row & (np.diff(cols) <= 0))
            if len(bad):
                raise GraphError(f"row {rows[bad[0]]}: column indices must be strictly increasing")
        object.__setattr__(self, "row_offsets", _frozen(offs))
        object.__setattr__(self, "col_indices", _frozen(cols))
        object.__setattr__(self, "values", _frozen(vals))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_rows, self.num_cols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    @cached_property
    def _scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.col_indices, self.row_offsets), shape=self.shape)

    @cached_property
    def _scipy_t(self) -> sp.csr_matrix:
        return self._scipy.T.tocsr()

    def matmul(self, dense: np.ndarray) -> np.ndarray:
        if dense.shape[0] != self.num_cols:
            raise GraphError(f"cannot multiply {self.shape} by {dense.shape}")
        return np.asarray(self._scipy @ dense)

    def rmatmul_t(self, dense: np.ndarray) -> np.ndarray:
        """Return ``self.T @ dense``."""
        if dense.shape[0] != self.num_rows:
            raise GraphError(f"cannot multiply {self.shape[::-1]} by {dense.shape}")
        return np.asarray(self._scipy_t @ dense)

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
        return self.col_indices[lo:hi], self.values[lo:hi]

    def get(self, i: int, j: int) -> float:
        cols, vals = self.row(i)
        k = np.searchsorted(cols, j)
        if k < len(cols) and cols[k] == j:
            return float(vals[k])
        return 0.0

    def to_dense(self) -> np.ndarray:
        return self._scipy.toarray()

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))


@dataclass(frozen=True, eq=False)
class GraphDataset:
    """Simple undirected graph with node features and labels.

    ``edges`` holds each undirected edge once as ``(u, v)`` with ``u < v``,
    sorted lexicographically, so equal graphs compare equal array-wise.
    """

    num_nodes: int
    num_classes: int
    features: np.ndarray
    labels: np.ndarray
    edges: np.ndarray
    name: str = "graph"

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def neighbor_csr(self) -> tuple[np.ndarray, np.ndarray]:
        """Row offsets and sorted neighbor lists of the symmetric edge set."""
        n = self.num_nodes
        if len(self.edges):
            src = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
            dst = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        else:
            src = dst = np.zeros(0, dtype=np.int64)
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.add.at(offsets, src + 1, 1)
        return np.cumsum(offsets), dst


def canonical_edges(edges: Iterable[Sequence[int]], num_nodes: int) -> np.ndarray:
    """Validate, symmetrize and deduplicate an edge list; self-pairs are dropped."""
    arr = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GraphError(f"edges must be pairs, got array of shape {arr.shape}")
    bad = np.flatnonzero((arr < 0).any(axis=1) | (arr >= num_nodes).any(axis=1))
    if len(bad):
        u, v = arr[bad[0]]
        endpoint = u if (u < 0 or u >= num_nodes) else v
        raise GraphError(f"edge ({u}, {v}): endpoint {endpoint} out of range for {num_nodes} nodes")
    arr = arr[arr[:, 0] != arr[:, 1]]
    arr = np.sort(arr, axis=1)
    if len(arr) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(arr, axis=0)


def build_graph(edges, num_nodes: int, features, labels, num_classes: int,
                name: str = "graph") -> GraphDataset:
    if num_classes < 2:
        raise GraphError(f"need at least 2 classes, got {num_classes}")
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != num_nodes:
        raise GraphError(f"features must have {num_nodes} rows, got shape {features.shape}")
    labels = np.asarray(labels)
    if labels.shape != (num_nodes,):
        raise GraphError(f"labels must have {num_nodes} entries, got shape {labels.shape}")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise GraphError("labels must be integers")
    labels = labels.astype(np.int64)
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if len(bad):
        raise GraphError(f"node {bad[0]}: label {labels[bad[0]]} outside [0, {num_classes})")
    return GraphDataset(
        num_nodes=int(num_nodes),
        num_classes=int(num_classes),
        features=_frozen(features),
        labels=_frozen(labels),
        edges=_frozen(canonical_edges(edges, num_nodes)),
        name=name,
    )


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    matrix: CsrMatrix
    degrees_with_self_loops: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.matrix.num_rows


def normalize_adjacency(g: GraphDataset) -> NormalizedAdjacency:
    """Build D^-1/2 (A + I) D^-1/2 with exactly one self-loop per node."""
    n = g.num_nodes
    offsets, nbrs = g.neighbor_csr()
    deg = np.diff(offsets)
    src = np.concatenate([np.repeat(np.arange(n), deg), np.arange(n)])
    dst = np.concatenate([nbrs, np.arange(n)])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    dtilde = deg + 1
    inv_sqrt = 1.0 / np.sqrt(dtilde.astype(np.float64))
    vals = inv_sqrt[src] * inv_sqrt[dst]
    row_offsets = np.concatenate([[0], np.cumsum(dtilde)])
    return NormalizedAdjacency(CsrMatrix(n, n, row_offsets, dst, vals), _frozen(dtilde.astype(np.int64)))


def node_degrees(g: GraphDataset) -> np.ndarray:
    """Distinct-neighbor counts, not counting the normalization self-loop."""
    deg = np.zeros(g.num_nodes, dtype=np.int64)
    if len(g.edges):
        np.add.at(deg, g.edges[:, 0], 1)
        np.add.at(deg, g.edges[:, 1], 1)
    return deg


def average_degree(g: GraphDataset) -> float:
    if g.num_nodes <= 0:
        raise GraphError("average degree of an empty graph is undefined")
    return 2.0 * g.num_edges / g.num_nodes
