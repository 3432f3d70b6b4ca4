"""Production network graph and its signed incidence matrix.

Buffers are stacked process by process: row ``2*i`` is the input buffer of
process ``i`` and row ``2*i + 1`` its output buffer (0-based).  Routes keep
the order they were given in; that order indexes every per-route vector
(controllers, actuator outcomes, CSV columns) downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from probctl.errors import TopologyError

__all__ = [
    "NetworkTopology",
    "build_cyclic",
    "incidence",
    "gram_decomposition",
    "input_row",
    "output_row",
]


def input_row(process: int) -> int:
    """Row of the input buffer of a 1-based process index."""
    return 2 * (process - 1)


def output_row(process: int) -> int:
    return 2 * (process - 1) + 1


@dataclass(frozen=True)
class NetworkTopology:
    """Processes ``1..n_processes`` joined by directed transport routes.

    ``routes`` holds 1-based ``(source, destination)`` pairs.  Material on a
    route leaves the source's output buffer and enters the destination's
    input buffer.
    """

    n_processes: int
    routes: tuple[tuple[int, int], ...]
    in_neighbors: tuple[frozenset[int], ...] = field(init=False, repr=False, compare=False)
    out_neighbors: tuple[frozenset[int], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = self.n_processes
        if not isinstance(n, (int, np.integer)) or n < 1:
            raise TopologyError(f"n_processes must be a positive integer, got {n!r}")
        routes = tuple((int(s), int(d)) for s, d in self.routes)
        if not routes:
            raise TopologyError("a topology needs at least one route")
        seen = set()
        for s, d in routes:
            if not (1 <= s <= n and 1 <= d <= n):
                raise TopologyError(f"route {s}->{d} has an endpoint outside 1..{n}")
            if s == d:
                raise TopologyError(f"self-loop route {s}->{d}")
            if (s, d) in seen:
                raise TopologyError(f"duplicate route {s}->{d}")
            seen.add((s, d))
        object.__setattr__(self, "n_processes", int(n))
        object.__setattr__(self, "routes", routes)
        ins = [set() for _ in range(n)]
        outs = [set() for _ in range(n)]
        for s, d in routes:
            outs[s - 1].add(d)
            ins[d - 1].add(s)
        object.__setattr__(self, "in_neighbors", tuple(frozenset(x) for x in ins))
        object.__setattr__(self, "out_neighbors", tuple(frozenset(x) for x in outs))

    @property
    def n_routes(self) -> int:
        return len(self.routes)

    @property
    def n_buffers(self) -> int:
        return 2 * self.n_processes

    def is_cyclic(self) -> bool:
        n = self.n_processes
        return n >= 2 and self.routes == tuple((i, i % n + 1) for i in range(1, n + 1))

    def route_labels(self) -> list[str]:
        return [f"{s}->{d}" for s, d in self.routes]


def build_cyclic(n: int) -> NetworkTopology:
    """Ring ``1->2->...->n->1``."""
    if not isinstance(n, (int, np.integer)) or n < 2:
        raise TopologyError(f"a cyclic network needs at least 2 processes, got {n!r}")
    return NetworkTopology(int(n), tuple((i, i % n + 1) for i in range(1, n + 1)))


def incidence(topology: NetworkTopology) -> np.ndarray:
    """Signed ``2N x M`` buffer-by-route matrix.

    Column ``k`` for route ``i->j`` carries ``-1`` on the output buffer of
    ``i`` and ``+1`` on the input buffer of ``j``, so ``-B.T @ x`` gives the
    per-route imbalance ``x_out[i] - x_in[j]`` and ``B @ u_a`` the per-buffer
    effect of realized transports.
    """
    B = np.zeros((topology.n_buffers, topology.n_routes))
    for k, (s, d) in enumerate(topology.routes):
        B[output_row(s), k] = -1.0
        B[input_row(d), k] = 1.0
    return B


def gram_decomposition(B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``B.T @ B`` into ``2 I`` plus the line-graph adjacency part."""
    B = np.asarray(B, dtype=float)
    G = B.T @ B
    scale = 2.0 * np.eye(G.shape[0])
    return scale, G - scale
