"""Message-level execution of the policy with one agent per node.

Each :class:`NodeAgent` is built from a :class:`LocalView` that holds only
what the node itself knows: its role, its neighbor ids and the estimated
gains of its incident links. Agents talk through a round-synchronous
:class:`MessageBus`; nothing else is shared.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import difftensor as dt
from . import gnn
from .channel import CsiTensor
from .rateops import PowerAllocation
from .topology import Topology


class LocalityViolation(RuntimeError):
    """A node tried to use information it does not hold locally."""


@dataclass(frozen=True)
class LocalView:
    node: int
    role_one_hot: np.ndarray
    gains: dict[int, np.ndarray]  # neighbor -> (B,) complex estimated gains

    @property
    def neighbors(self) -> list[int]:
        return sorted(self.gains)


def local_views(t: Topology, csi_est: CsiTensor) -> list[LocalView]:
    gains: list[dict[int, np.ndarray]] = [{} for _ in range(t.n)]
    for k, (i, j) in enumerate(t.edges):
        g = csi_est.h[:, k].copy()
        g.setflags(write=False)
        gains[i][j] = g
        gains[j][i] = g
    return [LocalView(i, t.role_one_hot(i), gains[i]) for i in range(t.n)]


@dataclass
class MessageBus:
    """Delivers payloads sent in round ``r`` at the start of round ``r + 1``."""

    payload_len: int
    _outbox: dict = field(default_factory=lambda: defaultdict(dict))
    _inbox: dict = field(default_factory=lambda: defaultdict(dict))
    sent: dict = field(default_factory=lambda: defaultdict(int))
    payload_sizes: set = field(default_factory=set)

    def send(self, src: int, dst: int, payload: np.ndarray) -> None:
        payload = np.asarray(payload, dtype=np.float64)
        if payload.shape != (self.payload_len,):
            raise ValueError(f"payload of shape {payload.shape}, expected ({self.payload_len},)")
        self._outbox[dst][src] = payload.copy()
        self.payload_sizes.add(payload.size)

    def deliver(self) -> None:
        self._inbox, self._outbox = self._outbox, defaultdict(dict)

    def receive(self, dst: int) -> dict[int, np.ndarray]:
        return dict(self._inbox.get(dst, {}))


class NodeAgent:
    def __init__(self, view: LocalView, params: gnn.GnnParams):
        self.view = view
        self.params = params
        B = params.n_bands
        self.x = gnn.node_input_features(B, view.role_one_hot[None, :])
        self.e = {j: gnn.edge_input_features(g[None, :]) for j, g in view.gains.items()}
        self.rounds = 0
        self.neighbor_embeddings: dict[int, np.ndarray] = {}

    def _check_sender(self, j: int) -> None:
        if j not in self.view.gains:
            raise LocalityViolation(f"node {self.view.node} got a payload from non-neighbor {j}")

    def send_messages(self, layer: int, bus: MessageBus) -> None:
        nbrs = self.view.neighbors
        if not nbrs:
            self.rounds += 1
            return
        x_rows = dt.Tensor(np.repeat(self.x, len(nbrs), axis=0))
        e_rows = dt.Tensor(np.concatenate([self.e[j] for j in nbrs], axis=0))
        e_new, msg = gnn.encoder_step(self.params, layer, x_rows, e_rows)
        for r, j in enumerate(nbrs):
            self.e[j] = e_new.values[r: r + 1]
            bus.send(self.view.node, j, msg.values[r])
        self.rounds += 1

    def receive_messages(self, layer: int, bus: MessageBus) -> None:
        inbox = bus.receive(self.view.node)
        for j in inbox:
            self._check_sender(j)
        if inbox:
            agg = np.mean([inbox[j] for j in sorted(inbox)], axis=0)[None, :]
        else:
            agg = np.zeros((1, self.params.n_bands))
        self.x = gnn.aggregator_step(self.params, layer, dt.Tensor(self.x), dt.Tensor(agg)).values

    def broadcast_embedding(self, bus: MessageBus) -> None:
        for j in self.view.neighbors:
            bus.send(self.view.node, j, self.x[0])
        self.rounds += 1

    def collect_embeddings(self, bus: MessageBus) -> None:
        inbox = bus.receive(self.view.node)
        for j in inbox:
            self._check_sender(j)
        self.neighbor_embeddings = inbox

    def allocate(self) -> dict[int, np.ndarray]:
        """Normalized amplitudes ``{neighbor: (B,)}`` for this node's outgoing links."""
        nbrs = self.view.neighbors
        if not nbrs:
            return {}
        missing = [j for j in nbrs if j not in self.neighbor_embeddings]
        if missing:
            raise LocalityViolation(f"node {self.view.node} lacks embeddings from {missing}")
        x_i = np.repeat(self.x, len(nbrs), axis=0)
        x_j = np.stack([self.neighbor_embeddings[j] for j in nbrs])
        e = np.concatenate([self.e[j] for j in nbrs], axis=0)
        inp = dt.Tensor(np.concatenate([e, x_i, x_j], axis=1))
        q = dt.softplus(dt.fc(self.params["decoder.out.W"], self.params["decoder.out.b"], inp)).values
        peak = q.max()
        if peak > 0:
            q = q / peak
            q = q / np.sqrt((q * q).sum())
        return {j: q[r] for r, j in enumerate(nbrs)}


@dataclass
class DecentralizedRun:
    allocation: PowerAllocation
    rounds: list[int]
    payload_sizes: set
    messages_sent: int


def simulate_decentralized(params: gnn.GnnParams, views: list[LocalView]) -> DecentralizedRun:
    """Run the policy node by node: ``L - 1`` layer rounds plus one embedding broadcast."""
    B = params.n_bands
    agents = [NodeAgent(v, params) for v in views]
    bus = MessageBus(payload_len=B)
    n_msgs = 0
    for layer in range(1, params.n_rounds):
        for a in agents:
            a.send_messages(layer, bus)
        n_msgs += sum(len(bus._outbox[d]) for d in list(bus._outbox))
        bus.deliver()
        for a in agents:
            a.receive_messages(layer, bus)
    for a in agents:
        a.broadcast_embedding(bus)
    n_msgs += sum(len(bus._outbox[d]) for d in list(bus._outbox))
    bus.deliver()
    for a in agents:
        a.collect_embeddings(bus)

    n = len(views)
    P = np.zeros((B, n, n))
    for a in agents:
        for j, amp in a.allocate().items():
            P[:, a.view.node, j] = amp
    return DecentralizedRun(PowerAllocation(P), [a.rounds for a in agents], bus.payload_sizes, n_msgs)
