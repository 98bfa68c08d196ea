"""MANET graphs: undirected topology with a source and a destination node."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np

MAX_RETRIES = 10_000


class GenerationError(RuntimeError):
    """Could not draw a source-destination connected graph."""


class NodeRole(Enum):
    TX = 0
    RX = 1
    RELAY = 2


@dataclass(frozen=True)
class Topology:
    """Undirected graph on nodes ``0..n-1``.

    ``edges`` is a sorted tuple of ``(i, j)`` pairs with ``i < j``. The order
    is significant: CSI tensors index gains by position in this tuple.
    """

    n: int
    edges: tuple[tuple[int, int], ...]
    source: int
    destination: int
    _adj: tuple[frozenset, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        canon = tuple(sorted({(min(i, j), max(i, j)) for i, j in self.edges}))
        for i, j in canon:
            if i == j:
                raise ValueError(f"self-loop on node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge ({i}, {j}) references a node outside 0..{self.n - 1}")
        if self.source == self.destination:
            raise ValueError("source and destination must differ")
        for u in (self.source, self.destination):
            if not 0 <= u < self.n:
                raise ValueError(f"node {u} outside 0..{self.n - 1}")
        object.__setattr__(self, "edges", canon)
        adj = [set() for _ in range(self.n)]
        for i, j in canon:
            adj[i].add(j)
            adj[j].add(i)
        object.__setattr__(self, "_adj", tuple(frozenset(a) for a in adj))

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def neighbors(self, i: int) -> frozenset:
        self._check_node(i)
        return self._adj[i]

    def degree(self, i: int) -> int:
        return len(self.neighbors(i))

    def role(self, i: int) -> NodeRole:
        self._check_node(i)
        if i == self.source:
            return NodeRole.TX
        if i == self.destination:
            return NodeRole.RX
        return NodeRole.RELAY

    def role_one_hot(self, i: int) -> np.ndarray:
        v = np.zeros(3)
        v[self.role(i).value] = 1.0
        return v

    def is_connected(self, a: int | None = None, b: int | None = None) -> bool:
        """Whether ``a`` reaches ``b`` (defaults: source and destination)."""
        a = self.source if a is None else a
        b = self.destination if b is None else b
        seen, stack = {a}, [a]
        while stack:
            u = stack.pop()
            if u == b:
                return True
            for v in self._adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return False

    @cached_property
    def directed_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(senders, receivers, undirected_index)`` over both directions of every edge.

        Direction ``2k`` is ``i -> j`` and ``2k + 1`` is ``j -> i`` for edge
        ``k = (i, j)``.
        """
        e = np.asarray(self.edges, dtype=np.intp).reshape(-1, 2)
        snd = np.empty(2 * len(e), dtype=np.intp)
        rcv = np.empty(2 * len(e), dtype=np.intp)
        snd[0::2], rcv[0::2] = e[:, 0], e[:, 1]
        snd[1::2], rcv[1::2] = e[:, 1], e[:, 0]
        return snd, rcv, np.repeat(np.arange(len(e)), 2)

    def relabel(self, perm) -> "Topology":
        """Topology with node ``i`` renamed to ``perm[i]``."""
        perm = list(perm)
        return Topology(
            self.n,
            tuple((perm[i], perm[j]) for i, j in self.edges),
            perm[self.source],
            perm[self.destination],
        )

    def _check_node(self, i: int) -> None:
        if not 0 <= i < self.n:
            raise ValueError(f"node {i} outside 0..{self.n - 1}")


def complete_graph(n: int, source: int = 0, destination: int | None = None) -> Topology:
    dst = n - 1 if destination is None else destination
    return Topology(n, tuple((i, j) for i in range(n) for j in range(i + 1, n)), source, dst)


def path_graph(n: int) -> Topology:
    return Topology(n, tuple((i, i + 1) for i in range(n - 1)), 0, n - 1)


def generate_erdos_renyi(n: int, p: float, rng: np.random.Generator,
                         max_retries: int = MAX_RETRIES) -> Topology:
    """Erdos-Renyi G(n, p) with uniformly placed source/destination.

    Draws are rejected until the source reaches the destination; other nodes
    may stay isolated.
    """
    if n < 2:
        raise ValueError("need at least two nodes")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"edge probability {p} outside [0, 1]")
    iu, ju = np.triu_indices(n, k=1)
    for _ in range(max_retries):
        keep = rng.random(iu.size) < p
        src, dst = rng.choice(n, size=2, replace=False)
        t = Topology(n, tuple(zip(iu[keep].tolist(), ju[keep].tolist())), int(src), int(dst))
        if t.is_connected():
            return t
    raise GenerationError(f"no source-destination connected G({n}, {p}) in {max_retries} draws")
