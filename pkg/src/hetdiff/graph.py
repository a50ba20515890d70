"""Bipartite association graph with string-id bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class HeteroGraph:
    """Two entity sets (side A, side B) and the labelled cross edges between them.

    ``edges`` is an ``(m, 2)`` int64 array of ``(a_index, b_index)`` rows,
    sorted and duplicate free.  ``a_ids`` / ``b_ids`` map indices back to the
    external string ids.
    """

    n_a: int
    n_b: int
    edges: np.ndarray
    a_ids: tuple = ()
    b_ids: tuple = ()
    a_index: dict = field(init=False, repr=False)
    b_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            if edges[:, 0].min() < 0 or edges[:, 0].max() >= self.n_a:
                raise GraphError("side-A index out of range")
            if edges[:, 1].min() < 0 or edges[:, 1].max() >= self.n_b:
                raise GraphError("side-B index out of range")
        key = np.unique(edges[:, 0] * max(self.n_b, 1) + edges[:, 1])
        if key.size != edges.shape[0]:
            raise GraphError("duplicate edges")
        edges = np.stack([key // max(self.n_b, 1), key % max(self.n_b, 1)], axis=1) if key.size else np.zeros((0, 2), np.int64)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)

        a_ids = tuple(self.a_ids) or tuple(f"a{i}" for i in range(self.n_a))
        b_ids = tuple(self.b_ids) or tuple(f"b{i}" for i in range(self.n_b))
        if len(a_ids) != self.n_a or len(b_ids) != self.n_b:
            raise GraphError("id tables do not match entity counts")
        a_index = {s: i for i, s in enumerate(a_ids)}
        b_index = {s: i for i, s in enumerate(b_ids)}
        if len(a_index) != self.n_a or len(b_index) != self.n_b:
            raise GraphError("id tables must be bijections")
        object.__setattr__(self, "a_ids", a_ids)
        object.__setattr__(self, "b_ids", b_ids)
        object.__setattr__(self, "a_index", a_index)
        object.__setattr__(self, "b_index", b_index)

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    def with_edges(self, edges) -> "HeteroGraph":
        """Same entities and ids, different edge set (used for train splits)."""
        return HeteroGraph(self.n_a, self.n_b, np.asarray(edges).reshape(-1, 2), self.a_ids, self.b_ids)

    def degree_a(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.n_a)

    def degree_b(self) -> np.ndarray:
        return np.bincount(self.edges[:, 1], minlength=self.n_b)

    def b_members_by_a(self) -> list[np.ndarray]:
        """For each side-A node, its linked side-B nodes (ascending)."""
        return _group(self.edges[:, 0], self.edges[:, 1], self.n_a)

    def a_members_by_b(self) -> list[np.ndarray]:
        order = np.lexsort((self.edges[:, 0], self.edges[:, 1]))
        e = self.edges[order]
        return _group(e[:, 1], e[:, 0], self.n_b)

    def edge_keys(self) -> np.ndarray:
        return self.edges[:, 0] * self.n_b + self.edges[:, 1]

    def has_edges(self, pairs) -> np.ndarray:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return np.isin(pairs[:, 0] * self.n_b + pairs[:, 1], self.edge_keys())


def _group(keys: np.ndarray, vals: np.ndarray, n: int) -> list[np.ndarray]:
    counts = np.bincount(keys, minlength=n)
    return np.split(vals.astype(np.int64), np.cumsum(counts)[:-1])


def graph_from_named_edges(pairs: Sequence[tuple[str, str]], a_ids: Sequence[str] = (), b_ids: Sequence[str] = ()) -> HeteroGraph:
    """Intern string ids in first-seen order (seeded by the optional id lists)."""
    a_index = {s: i for i, s in enumerate(a_ids)}
    b_index = {s: i for i, s in enumerate(b_ids)}
    out = []
    for sa, sb in pairs:
        ia = a_index.setdefault(sa, len(a_index))
        ib = b_index.setdefault(sb, len(b_index))
        out.append((ia, ib))
    edges = np.unique(np.asarray(out, dtype=np.int64).reshape(-1, 2), axis=0)
    return HeteroGraph(len(a_index), len(b_index), edges, tuple(a_index), tuple(b_index))
