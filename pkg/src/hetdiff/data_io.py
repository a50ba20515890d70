"""Edge-list ingestion, tripartite composition and synthetic planted graphs.

Edge files are UTF-8 TSV, one ``source<TAB>target[<TAB>relation]`` per
line.  Blank lines and lines starting with ``#`` are ignored; a header, if
any, must be commented out.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, DataError
from .graph import HeteroGraph, graph_from_named_edges
from .seeding import rng_for

log = logging.getLogger(__name__)


class ParseError(DataError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


class SchemaError(DataError):
    pass


@dataclass(frozen=True)
class EdgeRecord:
    source_id: str
    target_id: str
    relation: str = ""


@dataclass(frozen=True)
class EdgeList:
    records: tuple  # unique EdgeRecords in first-seen order
    duplicates: int
    relation: str

    def pairs(self) -> list[tuple[str, str]]:
        return [(r.source_id, r.target_id) for r in self.records]


def parse_edge_file(path, expected_relation: str | None = None) -> EdgeList:
    path = Path(path)
    seen: dict = {}
    duplicates = 0
    relation = expected_relation
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise ParseError(path, lineno, f"expected 2 or 3 tab-separated fields, found {len(parts)}")
            src, dst = parts[0], parts[1]
            if not src or not dst:
                raise ParseError(path, lineno, "empty id")
            rel = parts[2] if len(parts) == 3 else (relation or "")
            if len(parts) == 3:
                if relation is None:
                    relation = rel
                elif rel != relation:
                    raise SchemaError(f"{path}:{lineno}: relation {rel!r} does not match {relation!r}")
            key = (src, dst)
            if key in seen:
                duplicates += 1
                continue
            seen[key] = EdgeRecord(src, dst, rel)
    if duplicates:
        log.warning("%s: collapsed %d duplicate edge(s)", path, duplicates)
    return EdgeList(tuple(seen.values()), duplicates, relation or "")


def graph_from_edge_list(edges: EdgeList) -> HeteroGraph:
    return graph_from_named_edges(edges.pairs())


def load_graph(path, expected_relation: str | None = None) -> HeteroGraph:
    return graph_from_edge_list(parse_edge_file(path, expected_relation))


def write_edge_file(graph: HeteroGraph, path, relation: str | None = None) -> None:
    """Canonical form: sorted by (source id, target id), duplicate free."""
    rows = sorted((graph.a_ids[a], graph.b_ids[b]) for a, b in graph.edges)
    suffix = f"\t{relation}" if relation else ""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a, b in rows:
            fh.write(f"{a}\t{b}{suffix}\n")


def write_labeled_pairs(graph: HeteroGraph, pairs, labels, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# drug\tgene\tlabel\n")
        for (a, b), y in zip(np.asarray(pairs), np.asarray(labels)):
            fh.write(f"{graph.a_ids[a]}\t{graph.b_ids[b]}\t{int(y)}\n")


def read_labeled_pairs(path, a_ids: Iterable[str], b_ids: Iterable[str]) -> tuple[np.ndarray, np.ndarray]:
    """Read ``drug<TAB>gene<TAB>label`` lines against known id tables."""
    a_index = {s: i for i, s in enumerate(a_ids)}
    b_index = {s: i for i, s in enumerate(b_ids)}
    pairs, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise ParseError(path, lineno, "expected drug<TAB>gene<TAB>0|1")
            if parts[0] not in a_index or parts[1] not in b_index:
                raise DataError(f"{path}:{lineno}: unknown id in pair {parts[0]!r}, {parts[1]!r}")
            pairs.append((a_index[parts[0]], b_index[parts[1]]))
            labels.append(int(parts[2]))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2), np.asarray(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# Tripartite data
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TripartiteData:
    graph: HeteroGraph  # side A drugs, side B diseases
    bridges_a: list  # per bridge term, member drug indices
    bridges_b: list  # per bridge term, member disease indices
    bridge_ids: tuple
    orphan_bridges: int


def compose_tripartite(drug_bridge: EdgeList, target_bridge: EdgeList, drug_target: EdgeList) -> TripartiteData:
    """Drugs x targets (diseases) labelled by ``drug_target``, with homogeneous
    relations on both sides induced by the shared bridge terms (go terms).

    Entities that occur only in a bridge file are still added as nodes.
    Bridge terms attached to just one side are orphans: counted, logged,
    and ignored.
    """
    lab = graph_from_named_edges(drug_target.pairs())
    a_index = dict(lab.a_index)
    b_index = dict(lab.b_index)
    for r in drug_bridge.records:
        a_index.setdefault(r.source_id, len(a_index))
    for r in target_bridge.records:
        b_index.setdefault(r.source_id, len(b_index))
    graph = HeteroGraph(len(a_index), len(b_index), lab.edges, tuple(a_index), tuple(b_index))

    bridge_index: dict = {}
    members_a: dict = {}
    members_b: dict = {}
    for r in drug_bridge.records:
        k = bridge_index.setdefault(r.target_id, len(bridge_index))
        members_a.setdefault(k, []).append(a_index[r.source_id])
    for r in target_bridge.records:
        k = bridge_index.setdefault(r.target_id, len(bridge_index))
        members_b.setdefault(k, []).append(b_index[r.source_id])
    n = len(bridge_index)
    orphans = sum(1 for k in range(n) if (k in members_a) != (k in members_b))
    if orphans:
        log.warning("%d bridge term(s) appear on only one side", orphans)
    bridges_a = [np.unique(np.asarray(members_a.get(k, []), dtype=np.int64)) for k in range(n)]
    bridges_b = [np.unique(np.asarray(members_b.get(k, []), dtype=np.int64)) for k in range(n)]
    return TripartiteData(graph, bridges_a, bridges_b, tuple(bridge_index), orphans)


# ---------------------------------------------------------------------------
# Synthetic planted-block graphs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    n_a: int = 200
    n_b: int = 100
    n_blocks: int = 4
    p_in: float = 0.3
    p_out: float = 0.01
    seed: int = 7

    def validate(self) -> "SyntheticSpec":
        if self.n_a < 1 or self.n_b < 1 or self.n_blocks < 1:
            raise ConfigError("node and block counts must be positive")
        if not 0.0 <= self.p_out < self.p_in <= 1.0:
            raise ConfigError("need 0 <= p_out < p_in <= 1")
        return self


def edge_probabilities(spec: SyntheticSpec) -> np.ndarray:
    ba = np.arange(spec.n_a) % spec.n_blocks
    bb = np.arange(spec.n_b) % spec.n_blocks
    return np.where(ba[:, None] == bb[None, :], spec.p_in, spec.p_out)


def generate_synthetic(spec: SyntheticSpec) -> tuple[HeteroGraph, np.ndarray, np.ndarray]:
    """Planted block bipartite graph; node ``i`` of either side sits in block ``i % n_blocks``."""
    spec.validate()
    draw = rng_for(spec.seed, "synthetic").random((spec.n_a, spec.n_b))
    edges = np.argwhere(draw < edge_probabilities(spec))
    graph = HeteroGraph(
        spec.n_a,
        spec.n_b,
        edges,
        tuple(f"d{i}" for i in range(spec.n_a)),
        tuple(f"g{j}" for j in range(spec.n_b)),
    )
    return graph, np.arange(spec.n_a) % spec.n_blocks, np.arange(spec.n_b) % spec.n_blocks
