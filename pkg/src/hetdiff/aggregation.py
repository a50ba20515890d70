"""Meta-path attention aggregation followed by one normalized bipartite exchange."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SparseMatrix, Tensor
from .errors import ConfigError
from .graph import HeteroGraph
from .metapath import FlatNeighbors, flatten


@dataclass
class AttentionParams:
    """Attention vector of length ``2 * d`` stored as a ``(2d, 1)`` column."""

    a_vec: Tensor
    slope: float = 0.2

    @property
    def dim(self) -> int:
        return self.a_vec.shape[0] // 2


def homogeneous_aggregate(h: Tensor, relations, params: AttentionParams) -> Tensor:
    """``h'_i = h_i + sum_j alpha_ij h_j`` over the node's neighbor slots.

    Scores are ``LeakyReLU(a . [h_i || h_j])`` normalized by a softmax over the
    slots of node ``i``.  Nodes without slots are returned unchanged.
    ``relations`` is a sequence of per-node neighbor arrays or a
    :class:`FlatNeighbors`.
    """
    flat = relations if isinstance(relations, FlatNeighbors) else flatten(relations)
    n, d = h.shape
    if params.a_vec.shape != (2 * d, 1):
        raise ad.DimensionError(f"attention vector shape {params.a_vec.shape} does not match dimension {d}")
    if len(flat.src) and (flat.src.max() >= n or flat.dst.max() >= n):
        raise ad.DimensionError("relation index out of range")
    if flat.src.size == 0:
        return h
    left = ad.matmul(h, ad.slice_rows(params.a_vec, 0, d))
    right = ad.matmul(h, ad.slice_rows(params.a_vec, d, 2 * d))
    scores = ad.leaky_relu(ad.take_rows(left, flat.src) + ad.take_rows(right, flat.dst), params.slope)
    alpha = ad.grouped_softmax(scores, flat.offsets)
    return h + ad.neighbor_sum(alpha, h, flat.src, flat.dst, n)


def attention_weights(h: np.ndarray, relations: Sequence[np.ndarray], params: AttentionParams) -> list[np.ndarray]:
    """Per-node attention weights (values only), for inspection and tests."""
    flat = flatten(relations)
    d = h.shape[1]
    a = params.a_vec.values.reshape(-1)
    scores = ad.leaky_relu(Tensor(h[flat.src] @ a[:d] + h[flat.dst] @ a[d:]), params.slope)
    alpha = ad.grouped_softmax(scores, flat.offsets).values
    return [alpha[s:e] for s, e in zip(flat.offsets[:-1], flat.offsets[1:])]


@dataclass(frozen=True)
class NormalizedAdjacency:
    """``D^-1/2 (B + I) D^-1/2`` for the block matrix ``B = [[0, A], [A^T, 0]]``.

    Rows/cols ``0..n_a-1`` are side A, ``n_a..n_a+n_b-1`` side B.
    """

    matrix: SparseMatrix
    n_a: int
    n_b: int
    offdiag: np.ndarray  # bool mask over the matrix entries


def build_normalized_adjacency(graph: HeteroGraph) -> NormalizedAdjacency:
    n_a, n_b = graph.n_a, graph.n_b
    n = n_a + n_b
    a, b = graph.edges[:, 0], graph.edges[:, 1] + n_a
    deg = 1.0 + np.concatenate([graph.degree_a(), graph.degree_b()]).astype(np.float64)
    diag = np.arange(n, dtype=np.int64)
    row = np.concatenate([diag, a, b])
    col = np.concatenate([diag, b, a])
    order = np.lexsort((col, row))
    row, col = row[order], col[order]
    vals = 1.0 / np.sqrt(deg[row] * deg[col])
    return NormalizedAdjacency(SparseMatrix(n, n, row, col, vals), n_a, n_b, row != col)


def sparse_dropout(adj: NormalizedAdjacency, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Entry values with off-diagonal entries dropped at ``rate`` and survivors rescaled."""
    vals = adj.matrix.vals.copy()
    if rate == 0.0:
        return vals
    keep = rng.random(vals.size) >= rate
    drop = adj.offdiag & ~keep
    vals[drop] = 0.0
    vals[adj.offdiag & keep] /= 1.0 - rate
    return vals


def heterogeneous_propagate(
    adj: NormalizedAdjacency,
    e_d0: Tensor,
    e_g0: Tensor,
    dropout_rate: float = 0.1,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """One simultaneous exchange: each side receives the other's embeddings plus its own self-loop term."""
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {dropout_rate}")
    if e_d0.shape[0] != adj.n_a or e_g0.shape[0] != adj.n_b:
        raise ad.DimensionError("embedding row counts do not match the adjacency")
    mat = adj.matrix
    if training and dropout_rate > 0.0:
        if rng is None:
            raise ConfigError("training-mode dropout needs a random generator")
        mat = mat.with_values(sparse_dropout(adj, dropout_rate, rng))
    out = ad.spmm(mat, ad.concat([e_d0, e_g0], axis=0))
    n = adj.n_a + adj.n_b
    return ad.slice_rows(out, 0, adj.n_a), ad.slice_rows(out, adj.n_a, n)
