"""Electrical and communication graphs, incidence and Laplacian matrices.

Buses are indexed from 0 internally; configuration files and reports use
1-based numbering. Line ``l`` is stored with a fixed (source, sink) orientation
which only sets the sign convention for positive line current.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from dcmg.errors import GraphError


def check_connected(adjacency) -> bool:
    """Breadth-first search over the nonzero pattern of a square adjacency matrix."""
    adj = np.asarray(adjacency)
    n = adj.shape[0]
    if adj.ndim != 2 or adj.shape[1] != n:
        raise ValueError("adjacency must be square")
    if n == 0:
        return False
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(adj[i]):
            if not seen[j]:
                seen[j] = True
                queue.append(j)
    return bool(seen.all())


@dataclass(frozen=True)
class ElectricalGraph:
    """Power network: ``node_count`` buses joined by RL lines.

    ``edges`` holds (source, sink) pairs, 0-based. Line ids are the positions in
    ``edges`` plus one.
    """

    node_count: int
    edges: tuple[tuple[int, int], ...]
    resistance: np.ndarray = field(repr=False)
    inductance: np.ndarray = field(repr=False)

    def __post_init__(self):
        edges = tuple((int(a), int(b)) for a, b in self.edges)
        object.__setattr__(self, "edges", edges)
        R = np.array(self.resistance, dtype=float).reshape(-1)
        L = np.array(self.inductance, dtype=float).reshape(-1)
        R.setflags(write=False)
        L.setflags(write=False)
        object.__setattr__(self, "resistance", R)
        object.__setattr__(self, "inductance", L)

        n = self.node_count
        if n < 1:
            raise GraphError("electrical graph needs at least one bus", field="buses")
        if len(R) != len(edges) or len(L) != len(edges):
            raise GraphError("one resistance and one inductance per line required", field="lines")
        for l, (a, b) in enumerate(edges):
            if not (0 <= a < n and 0 <= b < n):
                raise GraphError(f"line {l + 1} references a bus outside 1..{n}", field="lines")
            if a == b:
                raise GraphError(f"line {l + 1} is a self-loop at bus {a + 1}", field="lines")
        if np.any(~np.isfinite(R)) or np.any(R <= 0):
            raise GraphError("line resistances must be > 0", field="lines.R")
        if np.any(~np.isfinite(L)) or np.any(L <= 0):
            raise GraphError("line inductances must be > 0", field="lines.L")
        if not check_connected(self.adjacency()):
            raise GraphError("electrical network is not connected", field="lines")

    @property
    def line_count(self) -> int:
        return len(self.edges)

    def adjacency(self) -> np.ndarray:
        n = self.node_count
        adj = np.zeros((n, n), dtype=bool)
        for a, b in self.edges:
            adj[a, b] = adj[b, a] = True
        return adj

    def scaled(self, resistance_factor=1.0, inductance_factor=1.0) -> "ElectricalGraph":
        return ElectricalGraph(
            self.node_count,
            self.edges,
            self.resistance * resistance_factor,
            self.inductance * inductance_factor,
        )


@dataclass(frozen=True)
class CommGraph:
    """Undirected weighted communication graph; ``weights[i, j] = a_ij``."""

    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        W = np.array(self.weights, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise GraphError("communication weights must form a square matrix", field="communication")
        if np.any(~np.isfinite(W)) or np.any(W < 0):
            raise GraphError("communication weights must be finite and >= 0", field="communication")
        if np.any(np.diag(W) != 0):
            raise GraphError("communication graph must not have self-loops", field="communication")
        if not np.array_equal(W, W.T):
            raise GraphError("communication weights must be symmetric", field="communication")
        if not check_connected(W > 0):
            raise GraphError("communication network is not connected", field="communication")
        W.setflags(write=False)
        object.__setattr__(self, "weights", W)

    @property
    def node_count(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def from_edges(cls, n: int, edges, weights=1.0) -> "CommGraph":
        W = np.zeros((n, n))
        w = np.broadcast_to(np.asarray(weights, dtype=float), (len(edges),))
        for (i, j), a in zip(edges, w):
            W[i, j] = W[j, i] = a
        return cls(W)

    def edge_list(self) -> list[tuple[int, int, float]]:
        i, j = np.nonzero(np.triu(self.weights))
        return [(int(a), int(b), float(self.weights[a, b])) for a, b in zip(i, j)]


def build_incidence(graph: ElectricalGraph) -> np.ndarray:
    """N x M incidence matrix: +1 at the sink of each line, -1 at its source."""
    B = np.zeros((graph.node_count, graph.line_count))
    for l, (src, snk) in enumerate(graph.edges):
        B[src, l] = -1.0
        B[snk, l] = 1.0
    return B


def electrical_laplacian(graph: ElectricalGraph) -> np.ndarray:
    """Conductance-weighted Laplacian ``B diag(1/R) B^T``."""
    B = build_incidence(graph)
    return (B / graph.resistance) @ B.T


def laplacian_from_weights(W) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    return np.diag(W.sum(axis=1)) - W


def comm_laplacian(comm: CommGraph) -> np.ndarray:
    return laplacian_from_weights(comm.weights)
