"""Gated message-passing policy that maps local CSI to per-link, per-band amplitudes.

All nodes share the parameters of a layer. Layer ``l`` turns node features
``x`` and directed edge features ``e`` into updated edge features, one
``B``-vector message per directed edge, and residually updated node features.
A shared decoder reads ``[e_ij || x_i || x_j]`` after the last layer (or
after any layer, for the per-layer monotonicity loss).

The batched functions here operate on a :class:`~manetpower.batch.GraphBatch`
so a whole training batch runs as one disjoint-union graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import difftensor as dt
from .batch import GraphBatch
from .channel import CsiTensor
from .rateops import PowerAllocation
from .topology import Topology

GATE_BIAS_INIT = 1.0


class GnnParams:
    """Named parameter tensors for ``L - 1`` gated layers plus the shared decoder.

    Shapes depend on ``n_bands`` and ``n_rounds`` only, never on graph size.
    """

    def __init__(self, n_bands: int, n_rounds: int, tensors: dict[str, dt.Tensor]):
        if n_rounds < 2:
            raise ValueError("need L >= 2 message rounds")
        self.n_bands = n_bands
        self.n_rounds = n_rounds
        self.tensors = tensors
        expected = param_shapes(n_bands, n_rounds)
        if set(expected) != set(tensors):
            raise ValueError("parameter names do not match the architecture")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {tensors[name].shape}, expected {shape}")

    @property
    def n_layers(self) -> int:
        return self.n_rounds - 1

    def __getitem__(self, name: str) -> dt.Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def parameters(self) -> list[dt.Tensor]:
        return list(self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self.tensors.items()}

    @classmethod
    def from_arrays(cls, n_bands: int, n_rounds: int, arrays: dict) -> "GnnParams":
        tensors = {k: dt.Tensor(np.asarray(arrays[k], dtype=np.float64), requires_grad=True)
                   for k in param_shapes(n_bands, n_rounds)}
        return cls(n_bands, n_rounds, tensors)

    def copy(self) -> "GnnParams":
        return GnnParams.from_arrays(self.n_bands, self.n_rounds, self.to_arrays())


def layer_dims(n_bands: int, layer: int) -> tuple[int, int]:
    """(node, edge) input widths of 1-based ``layer``."""
    return (n_bands + 3, 2 * n_bands) if layer == 1 else (n_bands, n_bands)


def param_shapes(n_bands: int, n_rounds: int) -> dict[str, tuple[int, ...]]:
    B = n_bands
    shapes: dict[str, tuple[int, ...]] = {}

    def linear(name, n_out, n_in):
        shapes[f"{name}.W"] = (n_out, n_in)
        shapes[f"{name}.b"] = (n_out,)

    for layer in range(1, n_rounds):
        dn, de = layer_dims(B, layer)
        p = f"layer{layer}"
        shapes[f"{p}.enc.norm.gain"] = (dn + de,)
        shapes[f"{p}.enc.norm.shift"] = (dn + de,)
        linear(f"{p}.enc.gate", B, dn + de)
        linear(f"{p}.enc.edge", B, dn + de)
        linear(f"{p}.enc.film_scale", B, B)
        linear(f"{p}.enc.film_shift", B, B)
        linear(f"{p}.enc.node", B, dn)
        linear(f"{p}.agg.update", B, B)
        if dn != B:
            # residual path needs a width change on the first layer
            linear(f"{p}.agg.skip", B, dn)
    linear("decoder.out", B, 3 * B)
    return shapes


def init_params(n_bands: int, n_rounds: int, rng: np.random.Generator) -> GnnParams:
    arrays = {}
    for name, shape in param_shapes(n_bands, n_rounds).items():
        if name.endswith(".W"):
            bound = 1.0 / np.sqrt(shape[1])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith("norm.gain"):
            arrays[name] = np.ones(shape)
        elif name.endswith("gate.b"):
            arrays[name] = np.full(shape, GATE_BIAS_INIT)
        else:
            arrays[name] = np.zeros(shape)
    return GnnParams.from_arrays(n_bands, n_rounds, arrays)


def _fc(params: GnnParams, name: str, x: dt.Tensor) -> dt.Tensor:
    return dt.fc(params[f"{name}.W"], params[f"{name}.b"], x)


# --- batched computation ----------------------------------------------------


@dataclass
class LayerStates:
    """Node and edge features entering each layer; index 0 is the input."""

    x: list[dt.Tensor]
    e: list[dt.Tensor]


def edge_input_features(h: np.ndarray) -> np.ndarray:
    """``(Re h1, Im h1, ..., Re hB, Im hB)`` per row of a ``(rows, B)`` complex array."""
    out = np.empty(h.shape[:-1] + (2 * h.shape[-1],))
    out[..., 0::2] = h.real
    out[..., 1::2] = h.imag
    return out


def node_input_features(n_bands: int, role_one_hot: np.ndarray) -> np.ndarray:
    rows = role_one_hot.shape[0]
    return np.concatenate([np.full((rows, n_bands), 1.0 / n_bands), role_one_hot], axis=1)


def init_features(batch: GraphBatch) -> tuple[np.ndarray, np.ndarray]:
    roles = np.zeros((batch.n_nodes, 3))
    roles[:, 2] = 1.0
    roles[batch.source] = (1.0, 0.0, 0.0)
    roles[batch.destination] = (0.0, 1.0, 0.0)
    return node_input_features(batch.n_bands, roles), edge_input_features(batch.h)


def encoder_step(params: GnnParams, layer: int, x_send: dt.Tensor, e: dt.Tensor,
                 node_term: dt.Tensor | None = None) -> tuple[dt.Tensor, dt.Tensor]:
    """Updated edge features and messages for rows of (sender features, edge features).

    ``node_term`` lets callers pass a precomputed ``node-FC(x_sender)``.
    """
    p = f"layer{layer}.enc"
    z = dt.layer_norm(dt.concat([x_send, e]), params[f"{p}.norm.gain"], params[f"{p}.norm.shift"])
    gate = dt.sigmoid(_fc(params, f"{p}.gate", z))
    e_new = gate * _fc(params, f"{p}.edge", z)
    if node_term is None:
        node_term = _fc(params, f"{p}.node", x_send)
    msg = _fc(params, f"{p}.film_scale", e_new) * node_term + _fc(params, f"{p}.film_shift", e_new)
    return e_new, msg


def aggregator_step(params: GnnParams, layer: int, x: dt.Tensor, agg: dt.Tensor) -> dt.Tensor:
    """Residual update from the already-averaged incoming messages ``agg``."""
    p = f"layer{layer}.agg"
    base = _fc(params, f"{p}.skip", x) if f"{p}.skip.W" in params.tensors else x
    return base + _fc(params, f"{p}.update", agg)


def mean_incoming(msg: dt.Tensor, receivers: np.ndarray, n_nodes: int) -> dt.Tensor:
    """Mean of messages per receiving node; zero for nodes with no neighbors."""
    deg = np.bincount(receivers, minlength=n_nodes).astype(np.float64)
    inv = dt.Tensor((1.0 / np.maximum(deg, 1.0))[:, None])
    return dt.segment_sum(msg, receivers, n_nodes) * inv


def forward(params: GnnParams, batch: GraphBatch) -> LayerStates:
    """Run all ``L - 1`` rounds on the CSI held by ``batch``."""
    if batch.n_bands != params.n_bands:
        raise ValueError(f"batch has {batch.n_bands} bands, parameters expect {params.n_bands}")
    x0, e0 = init_features(batch)
    x, e = dt.Tensor(x0), dt.Tensor(e0)
    states = LayerStates([x], [e])
    for layer in range(1, params.n_rounds):
        node_term = dt.gather(_fc(params, f"layer{layer}.enc.node", x), batch.senders)
        e, msg = encoder_step(params, layer, dt.gather(x, batch.senders), e, node_term)
        x = aggregator_step(params, layer, x, mean_incoming(msg, batch.receivers, batch.n_nodes))
        states.x.append(x)
        states.e.append(e)
    return states


def decode_raw(params: GnnParams, x: dt.Tensor, e: dt.Tensor,
               senders: np.ndarray, receivers: np.ndarray) -> dt.Tensor:
    """Un-normalized positive amplitudes ``softplus(FC([e_ij || x_i || x_j]))``."""
    inp = dt.concat([e, dt.gather(x, senders), dt.gather(x, receivers)])
    return dt.softplus(_fc(params, "decoder.out", inp))


def normalize_per_node(q: dt.Tensor, senders: np.ndarray, n_nodes: int) -> dt.Tensor:
    """Scale each sender's slice to unit L2 norm; all-zero slices stay zero."""
    # q / |q| is scale invariant, so dividing by the slice maximum (held constant)
    # changes neither value nor gradient but keeps tiny softplus outputs from
    # underflowing the squared norm
    peak = np.zeros(n_nodes)
    np.maximum.at(peak, senders, q.values.max(axis=-1))
    peak[peak == 0] = 1.0
    q = q * dt.Tensor(1.0 / peak[senders, None])
    sq = dt.sum_last(dt.segment_sum(dt.square(q), senders, n_nodes))
    zero = (sq.values == 0).astype(np.float64)
    norm = dt.sqrt(sq + dt.Tensor(zero))
    return q / dt.gather(norm, senders)


def decode(params: GnnParams, x: dt.Tensor, e: dt.Tensor, batch: GraphBatch) -> dt.Tensor:
    """Feasible directed-edge amplitudes ``(D, B)``."""
    if x.shape[-1] != params.n_bands or e.shape[-1] != params.n_bands:
        raise ValueError("decoder needs length-B node and edge states")
    q = decode_raw(params, x, e, batch.senders, batch.receivers)
    return normalize_per_node(q, batch.senders, batch.n_nodes)


def decode_per_layer(params: GnnParams, states: LayerStates, batch: GraphBatch) -> list[dt.Tensor]:
    """Allocation after every gated layer; the last entry is the policy output."""
    return [decode(params, x, e, batch) for x, e in zip(states.x[1:], states.e[1:])]


def allocate_batch(params: GnnParams, batch: GraphBatch) -> np.ndarray:
    """Inference: directed-edge amplitudes for the whole batch."""
    states = forward(params, batch)
    return decode(params, states.x[-1], states.e[-1], batch).values


def allocate(params: GnnParams, t: Topology, csi_est: CsiTensor) -> PowerAllocation:
    q = allocate_batch(params, GraphBatch.single(t, csi_est))
    return PowerAllocation.from_directed(t, q)


def split_allocations(q: np.ndarray, batch: GraphBatch) -> list[PowerAllocation]:
    return [PowerAllocation.from_directed(t, qs) for t, qs in zip(batch.topologies, batch.split_edges(q))]
