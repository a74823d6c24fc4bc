"""Sparse undirected graphs in CSR form, symmetric normalization, and spmm.

Graphs are immutable after construction: no self-loops, each undirected edge
stored in both directions, column indices sorted within each row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import InputError, ShapeError


@dataclass(frozen=True)
class Graph:
    """Undirected graph without self-loops, CSR adjacency structure."""

    n: int
    row_offsets: np.ndarray  # int64, length n+1
    col_indices: np.ndarray  # int64, length 2*|E|

    def neighbors(self, i: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[i]:self.row_offsets[i + 1]]

    @property
    def num_edges(self) -> int:
        """Undirected edge count (each edge stored twice internally)."""
        return len(self.col_indices) // 2

    def edge_pairs(self) -> np.ndarray:
        """All (src, dst) pairs with src < dst, sorted, each edge once."""
        src = np.repeat(np.arange(self.n), np.diff(self.row_offsets))
        dst = self.col_indices
        keep = src < dst
        return np.stack([src[keep], dst[keep]], axis=1)


@dataclass(frozen=True)
class NormalizedAdjacency:
    """CSR of D̃^(-1/2) (A + I) D̃^(-1/2) with float64 weights in (0, 1]."""

    n: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    weights: np.ndarray
    _csr: sp.csr_matrix = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        mat = sp.csr_matrix(
            (self.weights, self.col_indices, self.row_offsets), shape=(self.n, self.n)
        )
        object.__setattr__(self, "_csr", mat)


def build_graph(edge_list, n: int) -> Graph:
    """Build a canonical Graph from raw (src, dst) pairs.

    Input pairs may contain duplicates, self-loops, or only one direction of
    an edge; the result is deduplicated, self-loop-free, symmetric, and
    sorted within each row.
    """
    if n <= 0:
        raise InputError(f"node count must be positive, got {n}")
    pairs = np.asarray(list(edge_list), dtype=np.int64).reshape(-1, 2)
    if pairs.size:
        bad = np.nonzero((pairs < 0) | (pairs >= n))[0]
        if bad.size:
            k = int(bad[0])
            raise InputError(
                f"edge ({pairs[k, 0]}, {pairs[k, 1]}) out of range for n={n}",
                line=k + 1,
            )
    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    keep = src != dst
    src, dst = src[keep], dst[keep]
    # Dedup on the encoded pair id, then rebuild CSR arrays.
    codes = np.unique(src * n + dst)
    src, dst = codes // n, codes % n
    row_offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(row_offsets, src + 1, 1)
    np.cumsum(row_offsets, out=row_offsets)
    return Graph(n=n, row_offsets=row_offsets, col_indices=dst.astype(np.int64))


def degrees(g: Graph) -> np.ndarray:
    """Per-node degree, self-loops excluded by construction."""
    return np.diff(g.row_offsets)


def normalize(g: Graph) -> NormalizedAdjacency:
    """Symmetric normalization with self-loops added.

    Isolated nodes end up with a unit self-loop, so propagation stays
    well-defined everywhere.
    """
    deg_tilde = (degrees(g) + 1).astype(np.float64)
    rows = np.concatenate([np.repeat(np.arange(g.n), np.diff(g.row_offsets)),
                           np.arange(g.n)])
    cols = np.concatenate([g.col_indices, np.arange(g.n)])
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    weights = 1.0 / np.sqrt(deg_tilde[rows] * deg_tilde[cols])
    row_offsets = np.zeros(g.n + 1, dtype=np.int64)
    np.add.at(row_offsets, rows + 1, 1)
    np.cumsum(row_offsets, out=row_offsets)
    return NormalizedAdjacency(
        n=g.n,
        row_offsets=row_offsets,
        col_indices=cols.astype(np.int64),
        weights=weights,
    )


def spmm(adj: NormalizedAdjacency, dense: np.ndarray) -> np.ndarray:
    """Sparse-dense product: row i of the result is sum_j w_ij * dense[j].

    Row accumulation is sequential in column order (scipy CSR kernel), so
    results are bitwise deterministic.
    """
    dense = np.asarray(dense, dtype=np.float64)
    if dense.ndim != 2 or dense.shape[0] != adj.n:
        raise ShapeError(
            f"spmm expects a ({adj.n}, h) matrix, got shape {dense.shape}"
        )
    return adj._csr @ dense


def to_dense(adj: NormalizedAdjacency) -> np.ndarray:
    """Dense copy of the normalized adjacency, for small-graph oracles."""
    return adj._csr.toarray()


def read_edge_list(path) -> list[tuple[int, int]]:
    """Parse `src<TAB>dst` lines; `#` starts a comment, blank lines skipped."""
    pairs = []
    path = Path(path)
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise InputError(
                    f"expected two node ids, got {raw.strip()!r}", path=path, line=lineno
                )
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise InputError(
                    f"non-integer node id in {raw.strip()!r}", path=path, line=lineno
                ) from None
    return pairs


def write_edge_list(g: Graph, path) -> None:
    """Emit each edge once as `src<TAB>dst` with src < dst, sorted."""
    with Path(path).open("w") as fh:
        for src, dst in g.edge_pairs():
            fh.write(f"{src}\t{dst}\n")
