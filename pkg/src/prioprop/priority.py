"""Node priority measures: degree centrality, eigenvector centrality, and
heterophily degree, concatenated into one per-node feature block."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import Graph, degrees


def _adjacency_csr(g: Graph) -> sp.csr_matrix:
    data = np.ones(len(g.col_indices), dtype=np.float64)
    return sp.csr_matrix((data, g.col_indices, g.row_offsets), shape=(g.n, g.n))


@dataclass(frozen=True)
class PriorityFeatures:
    """n x 3 priority block, columns [degree, eigenvector centrality,
    heterophily degree], kept both raw and column-standardized."""

    raw: np.ndarray
    standardized: np.ndarray

    @property
    def n(self) -> int:
        return self.raw.shape[0]


def degree_centrality(g: Graph) -> np.ndarray:
    """Edge count per node, as reals."""
    return degrees(g).astype(np.float64)


def eigenvector_centrality(g: Graph, tol: float = 1e-8, max_iter: int = 1000) -> np.ndarray:
    """Nonnegative unit-L2 dominant eigenvector of the adjacency matrix.

    Power iteration from the all-ones vector, with a unit diagonal shift so
    the iteration also converges on bipartite spectra (the shift leaves the
    eigenvectors of A unchanged). Converged when successive normalized
    iterates differ by less than `tol` in max norm.
    """
    if g.num_edges == 0:
        warnings.warn("eigenvector centrality of an edgeless graph is uniform")
        return np.full(g.n, 1.0 / np.sqrt(g.n))
    adj = _adjacency_csr(g)
    x = np.full(g.n, 1.0 / np.sqrt(g.n))
    for _ in range(max_iter):
        nxt = x + adj @ x  # unit shift: (A + I) x
        nxt /= np.linalg.norm(nxt)
        if np.max(np.abs(nxt - x)) < tol:
            return nxt
        x = nxt
    warnings.warn(f"eigenvector centrality did not converge in {max_iter} iterations")
    return x


def heterophily_degree(g: Graph, features: np.ndarray) -> np.ndarray:
    """L2 distance between a node's normalized features and the mean of its
    neighbors' (self excluded); isolated nodes score 0."""
    x = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    zero_rows = norms[:, 0] == 0
    if zero_rows.any():
        warnings.warn(f"{int(zero_rows.sum())} zero feature rows kept as zero vectors")
    h0 = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    deg = degrees(g)
    agg = _adjacency_csr(g) @ h0
    nonzero = deg > 0
    agg[nonzero] /= deg[nonzero, None]
    he = np.linalg.norm(h0 - agg, axis=1)
    he[~nonzero] = 0.0
    return he


def build_priority(g: Graph, features: np.ndarray) -> PriorityFeatures:
    """Assemble the raw priority block and a column-standardized copy.

    Standardization is (x - mean) / std per column with the std clamped
    below at 1e-12, so constant columns map to zero.
    """
    raw = np.column_stack([
        degree_centrality(g),
        eigenvector_centrality(g),
        heterophily_degree(g, features),
    ])
    mean = raw.mean(axis=0)
    std = np.maximum(raw.std(axis=0), 1e-12)
    return PriorityFeatures(raw=raw, standardized=(raw - mean) / std)


def write_priority_tsv(pf: PriorityFeatures, path) -> None:
    """Emit `node_id<TAB>degree<TAB>eigcen<TAB>hetero` rows (raw values)."""
    with Path(path).open("w") as fh:
        fh.write("node_id\tdegree\teigcen\thetero\n")
        for i, (d, ec, he) in enumerate(pf.raw):
            fh.write(f"{i}\t{d!r}\t{ec!r}\t{he!r}\n")
