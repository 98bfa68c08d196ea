"""Disjoint-union batching of (topology, CSI) samples.

Every model and solver in the package works on a :class:`GraphBatch`: nodes
of all samples are renumbered into one global range and directed edges are
listed in per-sample order (``2k`` is ``i -> j``, ``2k + 1`` is ``j -> i`` for
the sample's ``k``-th undirected edge). Per-edge quantities are therefore
plain ``(n_directed, B)`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import CsiTensor
from .topology import Topology


@dataclass(eq=False)
class GraphBatch:
    topologies: list[Topology]
    csis: list[CsiTensor]
    n_bands: int
    node_offset: np.ndarray      # (S + 1,)
    edge_offset: np.ndarray      # (S + 1,) offsets into directed edges
    senders: np.ndarray          # (D,) global node ids
    receivers: np.ndarray        # (D,)
    edge_sample: np.ndarray      # (D,) sample id per directed edge
    node_sample: np.ndarray      # (N,)
    h: np.ndarray                # (D, B) complex gain of each directed edge
    noise_variance: np.ndarray   # (S, B)
    source: np.ndarray           # (S,) global ids
    destination: np.ndarray      # (S,)

    @classmethod
    def from_samples(cls, topologies, csis) -> "GraphBatch":
        topologies, csis = list(topologies), list(csis)
        if not topologies or len(topologies) != len(csis):
            raise ValueError("need one CSI tensor per topology, at least one sample")
        B = csis[0].n_bands
        node_off = np.zeros(len(topologies) + 1, dtype=np.intp)
        edge_off = np.zeros(len(topologies) + 1, dtype=np.intp)
        snd, rcv, hs = [], [], []
        for s, (t, c) in enumerate(zip(topologies, csis)):
            if not c.matches(t) or c.n_bands != B:
                raise ValueError(f"sample {s}: CSI does not match its topology / band count")
            ls, lr, und = t.directed_edges
            snd.append(ls + node_off[s])
            rcv.append(lr + node_off[s])
            hs.append(c.h.T[und])
            node_off[s + 1] = node_off[s] + t.n
            edge_off[s + 1] = edge_off[s] + 2 * t.n_edges
        S = len(topologies)
        return cls(
            topologies=topologies,
            csis=csis,
            n_bands=B,
            node_offset=node_off,
            edge_offset=edge_off,
            senders=np.concatenate(snd).astype(np.intp),
            receivers=np.concatenate(rcv).astype(np.intp),
            edge_sample=np.repeat(np.arange(S), np.diff(edge_off)),
            node_sample=np.repeat(np.arange(S), np.diff(node_off)),
            h=np.concatenate(hs, axis=0).reshape(-1, B),
            noise_variance=np.stack([c.noise_variance for c in csis]),
            source=np.array([t.source for t in topologies], dtype=np.intp) + node_off[:-1],
            destination=np.array([t.destination for t in topologies], dtype=np.intp) + node_off[:-1],
        )

    @classmethod
    def single(cls, t: Topology, csi: CsiTensor) -> "GraphBatch":
        return cls.from_samples([t], [csi])

    @property
    def n_samples(self) -> int:
        return len(self.topologies)

    @property
    def n_nodes(self) -> int:
        return int(self.node_offset[-1])

    @property
    def n_directed(self) -> int:
        return int(self.edge_offset[-1])

    @property
    def max_nodes(self) -> int:
        return max(t.n for t in self.topologies)

    def gain_over_noise(self) -> np.ndarray:
        """|h|^2 / sigma_b^2 per directed edge and band."""
        return np.abs(self.h) ** 2 / self.noise_variance[self.edge_sample]

    def with_csis(self, csis) -> "GraphBatch":
        """Same topologies, different gains (e.g. a perturbed or estimated view)."""
        return GraphBatch.from_samples(self.topologies, csis)

    def split_edges(self, values: np.ndarray) -> list[np.ndarray]:
        """Per-sample slices of a directed-edge array."""
        return [values[a:b] for a, b in zip(self.edge_offset[:-1], self.edge_offset[1:])]
