"""Homogeneous relations induced by length-2 meta-paths, capped to ``tau`` slots.

Two nodes of the same side are related when they share a bridge node
(D-G-D uses genes as bridges, G-D-G uses drugs; the tripartite data uses go
terms for both).  Each node then keeps exactly ``tau`` neighbor slots:
larger neighborhoods are subsampled, smaller ones are padded by cycling
through the sorted neighbor list.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import HeteroGraph
from .errors import ConfigError
from .seeding import rng_for


@dataclass(frozen=True, eq=False)
class MetaPathRelations:
    neighbors_a: tuple  # tuple of int64 arrays, each of length tau or 0
    neighbors_b: tuple
    tau: int

    def total_entries(self) -> int:
        return sum(len(x) for x in self.neighbors_a) + sum(len(x) for x in self.neighbors_b)

    def __eq__(self, other):
        if not isinstance(other, MetaPathRelations) or self.tau != other.tau:
            return False
        return all(
            len(x) == len(y) and all(np.array_equal(u, v) for u, v in zip(x, y))
            for x, y in ((self.neighbors_a, other.neighbors_a), (self.neighbors_b, other.neighbors_b))
        )


@dataclass(frozen=True)
class FlatNeighbors:
    """Neighbor slots laid out for segment operations.

    Slot ``e`` connects ``src[e]`` to ``dst[e]``; slots of one source node are
    contiguous and delimited by ``offsets``.
    """

    src: np.ndarray
    dst: np.ndarray
    offsets: np.ndarray
    nodes: np.ndarray  # source nodes that own at least one slot


def flatten(neighbors: Sequence[np.ndarray]) -> FlatNeighbors:
    lengths = np.array([len(x) for x in neighbors], dtype=np.int64)
    nodes = np.flatnonzero(lengths)
    src = np.repeat(np.arange(len(neighbors), dtype=np.int64), lengths)
    dst = np.concatenate([np.asarray(x, dtype=np.int64) for x in neighbors]) if len(neighbors) else np.zeros(0, np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths[nodes])]).astype(np.int64)
    return FlatNeighbors(src, dst.astype(np.int64), offsets, nodes)


def build_pairs_via_bridge(bridge_members: Sequence[Sequence[int]], n_nodes: int | None = None) -> np.ndarray:
    """All ordered pairs ``(x_i, x_j)``, ``i != j``, of nodes sharing a bridge.

    Returns a sorted, duplicate-free ``(k, 2)`` int64 array.  A node that
    appears twice in one member list does not pair with itself.
    """
    keys = []
    if n_nodes is None:
        n_nodes = 1 + max((int(np.max(m)) for m in bridge_members if len(m)), default=-1)
    n = max(int(n_nodes), 1)
    for members in bridge_members:
        m = np.unique(np.asarray(members, dtype=np.int64))
        if m.size < 2:
            continue
        u = np.repeat(m, m.size)
        v = np.tile(m, m.size)
        keep = u != v
        keys.append(u[keep] * n + v[keep])
    if not keys:
        return np.zeros((0, 2), dtype=np.int64)
    key = np.unique(np.concatenate(keys))
    return np.stack([key // n, key % n], axis=1)


def pairs_to_neighbors(pairs: np.ndarray, n_nodes: int) -> list[np.ndarray]:
    """Ascending neighbor array per node from a sorted pair array."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    counts = np.bincount(pairs[:, 0], minlength=n_nodes)
    return np.split(pairs[:, 1], np.cumsum(counts)[:-1])


def enforce_threshold(neighbors: Sequence[np.ndarray], tau: int, seed: int, label: str = "") -> tuple:
    """Cap every neighbor list to exactly ``tau`` slots (or leave it empty).

    Oversized lists are subsampled without replacement with a generator keyed
    by ``(seed, label, node)``, so edge insertion order cannot matter.
    Undersized lists repeat their sorted neighbors cyclically.
    """
    if int(tau) < 1:
        raise ConfigError(f"neighbor threshold must be >= 1, got {tau}")
    tau = int(tau)
    out = []
    for node, nb in enumerate(neighbors):
        nb = np.unique(np.asarray(nb, dtype=np.int64))
        if nb.size == 0:
            out.append(nb)
        elif nb.size > tau:
            pick = rng_for(seed, "metapath", label, node).choice(nb.size, size=tau, replace=False)
            out.append(np.sort(nb[pick]))
        else:
            out.append(np.resize(nb, tau))
    return tuple(out)


def cap_bridges(bridge_members: Sequence[np.ndarray], cap: int | None, seed: int, label: str) -> list:
    """Optionally subsample oversized bridge member lists before enumeration."""
    if cap is None:
        return list(bridge_members)
    if cap < 2:
        raise ConfigError("bridge member cap must be >= 2")
    out = []
    for k, m in enumerate(bridge_members):
        m = np.asarray(m, dtype=np.int64)
        if m.size > cap:
            m = np.sort(rng_for(seed, "bridge-cap", label, k).choice(m, size=cap, replace=False))
        out.append(m)
    return out


def build_metapaths(
    graph: HeteroGraph,
    tau: int,
    seed: int,
    bridges_a: Sequence[np.ndarray] | None = None,
    bridges_b: Sequence[np.ndarray] | None = None,
    max_bridge_members: int | None = None,
) -> MetaPathRelations:
    """Capped side-A and side-B relations.

    By default side-A nodes are related through shared side-B nodes and vice
    versa.  ``bridges_a`` / ``bridges_b`` replace those with external bridge
    member lists (e.g. go terms in the tripartite setting).
    """
    if int(tau) < 1:
        raise ConfigError(f"neighbor threshold must be >= 1, got {tau}")
    if bridges_a is None:
        bridges_a = graph.a_members_by_b()
    if bridges_b is None:
        bridges_b = graph.b_members_by_a()
    bridges_a = cap_bridges(bridges_a, max_bridge_members, seed, "a")
    bridges_b = cap_bridges(bridges_b, max_bridge_members, seed, "b")
    raw_a = pairs_to_neighbors(build_pairs_via_bridge(bridges_a, graph.n_a), graph.n_a)
    raw_b = pairs_to_neighbors(build_pairs_via_bridge(bridges_b, graph.n_b), graph.n_b)
    return MetaPathRelations(
        enforce_threshold(raw_a, tau, seed, "a"),
        enforce_threshold(raw_b, tau, seed, "b"),
        int(tau),
    )


def write_relations(relations: MetaPathRelations, graph: HeteroGraph, path_a, path_b) -> None:
    """Dump capped slots as ``node_id<TAB>neighbor_id`` lines, one file per side."""
    for path, nbs, ids in ((path_a, relations.neighbors_a, graph.a_ids), (path_b, relations.neighbors_b, graph.b_ids)):
        with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
            for node, nb in enumerate(nbs):
                for j in nb:
                    fh.write(f"{ids[node]}\t{ids[int(j)]}\n")
