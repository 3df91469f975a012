"""Directed road graph of merged locations with cached all-pairs distances."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .base import IN_TRANSIT, InfeasibleAssignment, InputError, Request

UNREACHABLE = math.inf


class CityGraph:
    """Immutable directed graph with nonnegative arc lengths.

    Node ids are dense integers ``0..n_nodes-1``. Arc lengths may be
    asymmetric. All-pairs shortest distances are computed once at
    construction; ``distances[i, j]`` is the length of the shortest
    directed path from ``i`` to ``j`` (``inf`` if none).
    """

    def __init__(self, n_nodes: int, edges: Mapping[tuple[int, int], float] | Iterable[tuple[int, int, float]]):
        if n_nodes < 1:
            raise InputError(f"graph needs at least one node, got {n_nodes}")
        self.n_nodes = int(n_nodes)
        items = edges.items() if isinstance(edges, Mapping) else (((i, j), w) for i, j, w in edges)
        arcs: dict[tuple[int, int], float] = {}
        for (i, j), w in items:
            i, j, w = int(i), int(j), float(w)
            self._check_node(i)
            self._check_node(j)
            if not w >= 0 or math.isinf(w):
                raise InputError(f"edge ({i},{j}) has invalid distance {w!r}")
            if (i, j) in arcs:
                raise InputError(f"duplicate edge ({i},{j})")
            arcs[(i, j)] = w
        self._edges = arcs
        rows, cols = (np.array([k[x] for k in arcs], dtype=int) for x in (0, 1))
        # explicit zeros stay arcs in a csr matrix, so zero-length arcs are kept
        matrix = csr_matrix((np.array(list(arcs.values()), dtype=float), (rows, cols)),
                            shape=(self.n_nodes, self.n_nodes))
        dist = dijkstra(matrix, directed=True)
        dist.setflags(write=False)
        self._dist = dist

    @property
    def edges(self) -> dict[tuple[int, int], float]:
        return dict(self._edges)

    @property
    def distances(self) -> np.ndarray:
        return self._dist

    def _check_node(self, node: int) -> None:
        if not 0 <= node < self.n_nodes:
            raise InputError(f"unknown node id {node} (graph has {self.n_nodes} nodes)")

    def shortest_distance(self, src: int, dst: int) -> float:
        """Geo: length of the shortest directed path, or ``UNREACHABLE``."""
        self._check_node(src)
        self._check_node(dst)
        return float(self._dist[src, dst])

    def trip_utility(self, driver_loc: int, request: Request) -> float:
        """Trip length minus deadhead: ``dist(s, d) - dist(driver_loc, s)``."""
        if driver_loc == IN_TRANSIT:
            raise InfeasibleAssignment("driver is in transit")
        trip = self.shortest_distance(request.s, request.d)
        deadhead = self.shortest_distance(driver_loc, request.s)
        if math.isinf(trip) or math.isinf(deadhead):
            raise InfeasibleAssignment(
                f"request {request.id} ({request.s}->{request.d}) unreachable from node {driver_loc}"
            )
        return trip - deadhead

    def utility_matrix(self, locations: np.ndarray, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
        """Vectorised trip utilities, drivers x requests; ``-inf`` where infeasible."""
        locations = np.asarray(locations, dtype=int)
        starts = np.asarray(starts, dtype=int)
        ends = np.asarray(ends, dtype=int)
        trip = self._dist[starts, ends]
        deadhead = self._dist[np.ix_(locations, starts)]
        ok = np.isfinite(deadhead) & np.isfinite(trip)[None, :]
        util = np.full(deadhead.shape, -np.inf)
        util[ok] = np.broadcast_to(trip, deadhead.shape)[ok] - deadhead[ok]
        return util

    def save(self, path: str | Path) -> None:
        lines = [f"nodes={self.n_nodes}"]
        lines += [f"{i} {j} {w!r}" for (i, j), w in sorted(self._edges.items())]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CityGraph":
        path = Path(path)
        if not path.exists():
            raise InputError(f"graph file not found: {path}")
        lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("nodes="):
            raise InputError(f"{path}: missing 'nodes=<N>' header")
        n = int(lines[0].split("=", 1)[1])
        edges = []
        for k, ln in enumerate(lines[1:], start=2):
            parts = ln.split()
            if len(parts) != 3:
                raise InputError(f"{path}:{k}: expected 'from to distance'")
            edges.append((int(parts[0]), int(parts[1]), float(parts[2])))
        return cls(n, edges)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, CityGraph) and self.n_nodes == other.n_nodes and self._edges == other._edges

    def __repr__(self) -> str:
        return f"CityGraph(n_nodes={self.n_nodes}, n_edges={len(self._edges)})"
