"""Observation graph over timepoints.

Nodes are acquisitions, edges are pairwise registrations directed from a
reference timepoint to a target timepoint. The incidence matrix W has one
row per edge with -1 in the reference column and +1 in the target column;
in the log domain every observation then reads as W applied to the stack
of latent transforms.

A solvable graph must be connected and carry at least N-1 edges. Exactly
N-1 edges (a spanning tree) is legal but leaves no redundancy for the
robust solver to exploit, so it draws an advisory warning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DisconnectedGraph, DuplicateEdge, UnknownNode, ValidationFailure

EDGE_KINDS = ("rigid", "svf")


@dataclass(frozen=True)
class TimepointNode:
    id: str
    time_years: float


@dataclass(frozen=True)
class ObservationEdge:
    """Directed registration observation. payload is a file path or an
    in-memory transform, the graph layer never looks inside it."""

    ref: str
    target: str
    kind: str
    payload: object = None

    def __post_init__(self):
        if self.kind not in EDGE_KINDS:
            raise ValidationFailure(f"edge kind {self.kind!r} not in {EDGE_KINDS}")
        if self.ref == self.target:
            raise ValidationFailure(f"edge {self.ref!r} -> {self.target!r} is a self loop")


@dataclass(frozen=True)
class IncidenceMatrix:
    matrix: np.ndarray
    node_ids: tuple[str, ...]
    edge_pairs: tuple[tuple[str, str], ...]

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_edges(self) -> int:
        return len(self.edge_pairs)


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def build_incidence(
    nodes: list[TimepointNode], edges: list[ObservationEdge]
) -> IncidenceMatrix:
    """Incidence matrix for a homogeneous edge list.

    Raises UnknownNode for edges naming absent timepoints, DuplicateEdge
    for a repeated (ref, target, kind) triple and DisconnectedGraph when
    the edges do not connect every timepoint.
    """
    ids = [n.id for n in nodes]
    if len(set(ids)) != len(ids):
        raise ValidationFailure(f"duplicate timepoint ids in {ids}")
    col = {nid: i for i, nid in enumerate(ids)}
    seen = set()
    rows = []
    pairs = []
    uf = _UnionFind(len(ids))
    for e in edges:
        if e.ref not in col:
            raise UnknownNode(f"edge references unknown timepoint {e.ref!r}")
        if e.target not in col:
            raise UnknownNode(f"edge references unknown timepoint {e.target!r}")
        key = (e.ref, e.target, e.kind)
        if key in seen:
            raise DuplicateEdge(f"edge {e.ref!r} -> {e.target!r} ({e.kind}) appears twice")
        seen.add(key)
        row = np.zeros(len(ids))
        row[col[e.ref]] = -1.0
        row[col[e.target]] = 1.0
        rows.append(row)
        pairs.append((e.ref, e.target))
        uf.union(col[e.ref], col[e.target])
    if len(ids) > 1:
        roots = {uf.find(i) for i in range(len(ids))}
        if len(roots) > 1:
            comps: dict[int, list[str]] = {}
            for i, nid in enumerate(ids):
                comps.setdefault(uf.find(i), []).append(nid)
            raise DisconnectedGraph(
                f"observation graph splits into components {sorted(comps.values())}"
            )
    if len(edges) < len(ids):
        warnings.warn(
            f"only {len(edges)} edges for {len(ids)} timepoints: a spanning tree is "
            "solvable but leaves the robust solver no redundancy",
            stacklevel=2,
        )
    mat = np.array(rows) if rows else np.zeros((0, len(ids)))
    return IncidenceMatrix(mat, tuple(ids), tuple(pairs))
