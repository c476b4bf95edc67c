from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations


@dataclass(frozen=True)
class InteractionGraph:
    """Undirected interaction graph over agents ``0 .. n_nodes-1``.

    Edges are stored as sorted ``(i, j)`` pairs with ``i < j``; each edge
    subproblem is owned (computed) by its lower-indexed endpoint.
    """

    n_nodes: int
    edges: tuple = ()

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ValueError("graph needs at least one node")
        seen = set()
        norm = []
        for e in self.edges:
            i, j = (int(v) for v in e)
            if i == j:
                raise ValueError(f"self-loop on node {i}")
            if not (0 <= i < self.n_nodes and 0 <= j < self.n_nodes):
                raise ValueError(f"edge {e} references an unknown node")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
            norm.append(key)
        object.__setattr__(self, "edges", tuple(sorted(norm)))

    @classmethod
    def complete(cls, n: int) -> "InteractionGraph":
        return cls(n, tuple(combinations(range(n), 2)))

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def neighbors(self, i: int) -> tuple:
        out = [b if a == i else a for a, b in self.edges if i in (a, b)]
        return tuple(sorted(out))

    def are_neighbors(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self.edges

    @staticmethod
    def owner(edge) -> int:
        return min(edge)

    def owned_edges(self, i: int) -> tuple:
        return tuple(e for e in self.edges if e[0] == i)
