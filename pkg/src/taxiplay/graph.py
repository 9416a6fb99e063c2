"""Directed street graph with unit-minute edges and all-pairs shortest paths.

Node indices are 0-based everywhere in this package (files, APIs, arrays).
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

log = logging.getLogger(__name__)


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class StreetGraph:
    node_count: int
    edges: frozenset
    adjacency: tuple  # adjacency[i] -> sorted tuple of out-neighbors
    dist: np.ndarray = field(repr=False)
    next_hop: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.node_count

    def neighbors(self, i: int) -> tuple:
        return self.adjacency[i]

    def adjacency_matrix(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        for i, j in self.edges:
            a[i, j] = 1.0
        return a

    def diameter(self) -> int:
        return int(self.dist.max())


def _bfs_from(adjacency, source: int, n: int) -> np.ndarray:
    d = np.full(n, -1, dtype=np.int64)
    d[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adjacency[u]:
            if d[v] < 0:
                d[v] = d[u] + 1
                queue.append(v)
    return d


def from_edges(edges: Iterable[tuple[int, int]], node_count: int | None = None) -> StreetGraph:
    """Build a graph and precompute hop distances and first-move tables.

    Duplicate edges are dropped with a warning; self-loops and graphs that are
    not strongly connected raise ``GraphError``.
    """
    seen: set[tuple[int, int]] = set()
    for i, j in edges:
        i, j = int(i), int(j)
        if i < 0 or j < 0:
            raise GraphError(f"negative node index in edge ({i}, {j})")
        if i == j:
            raise GraphError(f"self-loop at node {i}")
        if (i, j) in seen:
            log.warning("duplicate edge (%d, %d) ignored", i, j)
            continue
        seen.add((i, j))
    if not seen:
        raise GraphError("graph needs at least one edge")
    n = max(max(e) for e in seen) + 1
    if node_count is not None:
        if node_count < n:
            raise GraphError(f"edge references node {n - 1} but node_count={node_count}")
        n = node_count

    adjacency = tuple(tuple(sorted(j for (i, j) in seen if i == u)) for u in range(n))
    dist = np.empty((n, n), dtype=np.int64)
    for s in range(n):
        dist[s] = _bfs_from(adjacency, s, n)
        if (dist[s] < 0).any():
            t = int(np.flatnonzero(dist[s] < 0)[0])
            raise GraphError(f"graph is not strongly connected: node {t} unreachable from node {s}")

    # lowest-index neighbor on some shortest path
    next_hop = np.empty((n, n), dtype=np.int64)
    for i in range(n):
        next_hop[i, i] = i
        nbrs = np.array(adjacency[i], dtype=np.int64)
        for j in range(n):
            if i == j:
                continue
            ok = nbrs[dist[nbrs, j] == dist[i, j] - 1]
            next_hop[i, j] = ok[0]

    dist.setflags(write=False)
    next_hop.setflags(write=False)
    return StreetGraph(n, frozenset(seen), adjacency, dist, next_hop)


def load_graph(stream: TextIO, node_count: int | None = None) -> StreetGraph:
    """Read an edge list: one ``i j`` pair per line, ``#`` starts a comment line."""
    edges = []
    for lineno, line in enumerate(stream, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GraphError(f"line {lineno}: expected 'i j', got {line!r}")
        try:
            edges.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise GraphError(f"line {lineno}: non-integer node index in {line!r}") from None
    return from_edges(edges, node_count)


def save_graph(g: StreetGraph, stream: TextIO) -> None:
    stream.write(f"# {g.n} nodes, {len(g.edges)} directed edges\n")
    for i, j in sorted(g.edges):
        stream.write(f"{i} {j}\n")


def shortest_path_distance(g: StreetGraph, i: int, j: int) -> int:
    if not (0 <= i < g.n and 0 <= j < g.n):
        raise IndexError(f"node index out of range: ({i}, {j}) for n={g.n}")
    return int(g.dist[i, j])


def shortest_path(g: StreetGraph, i: int, j: int) -> list[int]:
    path = [i]
    while path[-1] != j:
        path.append(int(g.next_hop[path[-1], j]))
    return path


def grid_graph(rows: int, cols: int) -> StreetGraph:
    """Bidirectional rows x cols lattice, node id = r * cols + c."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            u = r * cols + c
            if c + 1 < cols:
                edges += [(u, u + 1), (u + 1, u)]
            if r + 1 < rows:
                edges += [(u, u + cols), (u + cols, u)]
    return from_edges(edges, rows * cols)
