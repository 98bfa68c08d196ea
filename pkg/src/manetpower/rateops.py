"""Link rates, bottleneck routing, the exact objective and its smooth-min surrogate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import difftensor as dt
from .batch import GraphBatch
from .channel import CsiTensor
from .topology import Topology

FEASIBILITY_TOL = 1e-9
_LN2 = np.log(2.0)


class InfeasibleAllocation(ValueError):
    """A power tensor violates non-negativity, support or the per-node budget."""


# --- allocations ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PowerAllocation:
    """Amplitudes ``P[b, i, j]`` of node ``i`` transmitting to ``j`` on band ``b``."""

    P: np.ndarray

    @property
    def n_bands(self) -> int:
        return self.P.shape[0]

    @classmethod
    def zeros(cls, t: Topology, n_bands: int) -> "PowerAllocation":
        return cls(np.zeros((n_bands, t.n, t.n)))

    @classmethod
    def from_directed(cls, t: Topology, q: np.ndarray) -> "PowerAllocation":
        """Build from a ``(2 * n_edges, B)`` array ordered like ``t.directed_edges``."""
        q = np.asarray(q, dtype=np.float64)
        snd, rcv, _ = t.directed_edges
        P = np.zeros((q.shape[1], t.n, t.n))
        P[:, snd, rcv] = q.T
        return cls(P)

    def to_directed(self, t: Topology) -> np.ndarray:
        snd, rcv, _ = t.directed_edges
        return self.P[:, snd, rcv].T.copy()

    def node_norms(self) -> np.ndarray:
        return np.sqrt((self.P ** 2).sum(axis=(0, 2)))

    def relabel(self, perm) -> "PowerAllocation":
        perm = np.asarray(perm)
        out = np.zeros_like(self.P)
        out[:, perm[:, None], perm[None, :]] = self.P
        return PowerAllocation(out)


def feasibility_violations(P: PowerAllocation, t: Topology, tol: float = FEASIBILITY_TOL) -> list[str]:
    """Human-readable list of constraint violations (empty when feasible)."""
    arr = P.P
    problems = []
    if arr.shape[1:] != (t.n, t.n):
        return [f"shape {arr.shape} does not match {t.n} nodes"]
    if not np.all(np.isfinite(arr)):
        problems.append("non-finite entries")
    if np.any(arr < 0):
        problems.append("negative amplitude")
    if np.any(arr > 1 + tol):
        problems.append("amplitude above 1")
    support = np.zeros((t.n, t.n), dtype=bool)
    snd, rcv, _ = t.directed_edges
    support[snd, rcv] = True
    if np.any(arr[:, ~support] != 0):
        problems.append("power on a non-edge")
    norms = P.node_norms()
    bad = np.flatnonzero(norms > 1 + tol)
    if bad.size:
        problems.append(f"per-node budget exceeded at nodes {bad.tolist()} (max norm {norms.max():.12g})")
    return problems


def is_feasible(P: PowerAllocation, t: Topology, tol: float = FEASIBILITY_TOL) -> bool:
    return not feasibility_violations(P, t, tol)


def project_feasible(P_raw: PowerAllocation | np.ndarray) -> PowerAllocation:
    """Scale each node's slice by ``1 / max(1, ||slice||_2)``."""
    arr = P_raw.P if isinstance(P_raw, PowerAllocation) else np.asarray(P_raw, dtype=np.float64)
    if np.any(arr < 0):
        raise ValueError("projection expects non-negative amplitudes")
    norms = np.sqrt((arr ** 2).sum(axis=(0, 2)))
    return PowerAllocation(arr / np.maximum(1.0, norms)[None, :, None])


def project_feasible_directed(q: dt.Tensor, batch: GraphBatch) -> dt.Tensor:
    """Differentiable :func:`project_feasible` on a ``(D, B)`` directed-edge tensor."""
    sq = dt.sum_last(dt.segment_sum(dt.square(q), batch.senders, batch.n_nodes))
    over = (sq.values > 1.0).astype(np.float64)
    if not over.any():
        return q
    inv = dt.Tensor(1.0) / dt.sqrt(sq + dt.Tensor(1.0 - over))
    factor = inv * dt.Tensor(over) + dt.Tensor(1.0 - over)
    return q * dt.gather(factor, batch.senders)


# --- rates ------------------------------------------------------------------


def link_rate(h: complex, p: float, noise_variance: float) -> float:
    """AWGN rate ``log2(1 + |h|^2 p^2 / sigma^2)`` in bits per channel use."""
    if noise_variance <= 0:
        raise ValueError("noise variance must be positive")
    if p < 0:
        raise ValueError("amplitude must be non-negative")
    return float(np.log2(1.0 + abs(h) ** 2 * p * p / noise_variance))


def directed_rates(q: np.ndarray, batch: GraphBatch) -> np.ndarray:
    """Rates ``(D, B)`` for directed-edge amplitudes ``q``."""
    return np.log2(1.0 + batch.gain_over_noise() * q * q)


def directed_rates_tensor(q: dt.Tensor, batch: GraphBatch) -> dt.Tensor:
    g = dt.Tensor(batch.gain_over_noise())
    return dt.log(dt.square(q) * g + 1.0) * (1.0 / _LN2)


# --- widest path ------------------------------------------------------------


@dataclass(frozen=True)
class WidestPaths:
    """Batched widest-path solutions for ``K`` (graph, band) problems.

    ``nodes[k, :hops[k] + 1]`` is the path, ``edges[k, :hops[k]]`` the row
    index of each hop in the caller's directed-edge array. ``hops == 0`` means
    no path (bottleneck reported as 0).
    """

    bottleneck: np.ndarray
    hops: np.ndarray
    nodes: np.ndarray
    edges: np.ndarray

    def path(self, k: int) -> list[int]:
        h = int(self.hops[k])
        return self.nodes[k, : h + 1].tolist() if h else []


def widest_paths_padded(R: np.ndarray, eid: np.ndarray, src: np.ndarray, dst: np.ndarray) -> WidestPaths:
    """Max-bottleneck paths on ``K`` padded graphs at once.

    ``R[k, u, v]`` is the rate of directed link ``u -> v`` (``-inf`` where no
    link exists), ``eid[k, u, v]`` the row to report for that link. Ties in
    the bottleneck go to the fewest hops, then the lexicographically smallest
    node sequence.
    """
    K, n, _ = R.shape
    ar = np.arange(K)
    best = np.full((K, n), -np.inf)
    best[ar, src] = np.inf
    for _ in range(n - 1):
        cand = np.minimum(best[:, :, None], R).max(axis=1)
        new = np.maximum(best, cand)
        if np.array_equal(new, best):
            break
        best = new
    width = best[ar, dst]
    found = np.isfinite(width)  # -inf means unreachable

    # among links no narrower than the optimum, any path attains it exactly
    ok = (R >= np.where(found, width, np.inf)[:, None, None]) & np.isfinite(R)
    dist = np.full((K, n), n + 1, dtype=np.intp)
    dist[ar, dst] = 0
    for _ in range(n - 1):
        via = np.where(ok, dist[:, None, :] + 1, n + 1).min(axis=2)
        new = np.minimum(dist, via)
        if np.array_equal(new, dist):
            break
        dist = new

    hops = np.where(found, dist[ar, src], 0)
    max_h = int(hops.max()) if K else 0
    nodes = np.full((K, max_h + 1), -1, dtype=np.intp)
    edges = np.full((K, max(max_h, 1)), -1, dtype=np.intp)
    cur = src.copy()
    nodes[:, 0] = np.where(found, cur, -1)
    for step in range(max_h):
        active = hops > step
        row_ok = ok[ar, cur] & (dist == (dist[ar, cur] - 1)[:, None])
        nxt = np.argmax(row_ok, axis=1)  # first True = smallest id
        edges[:, step] = np.where(active, eid[ar, cur, nxt], -1)
        cur = np.where(active, nxt, cur)
        nodes[:, step + 1] = np.where(active, cur, -1)
    return WidestPaths(np.where(found, width, 0.0), hops, nodes, edges)


def _batch_problems(rates: np.ndarray, batch: GraphBatch):
    """Pad per-sample rate arrays into ``(S * B, n_max, n_max)`` problems."""
    S, B, n = batch.n_samples, batch.n_bands, batch.max_nodes
    local_s = batch.senders - batch.node_offset[batch.edge_sample]
    local_r = batch.receivers - batch.node_offset[batch.edge_sample]
    R = np.full((S, B, n, n), -np.inf)
    eid = np.full((S, B, n, n), -1, dtype=np.intp)
    rows = np.arange(batch.n_directed)
    usable = np.abs(batch.h) > 0
    for b in range(B):
        R[batch.edge_sample, b, local_s, local_r] = np.where(usable[:, b], rates[:, b], -np.inf)
        eid[batch.edge_sample, b, local_s, local_r] = rows
    src = np.repeat(batch.source - batch.node_offset[:-1], B)
    dst = np.repeat(batch.destination - batch.node_offset[:-1], B)
    return R.reshape(S * B, n, n), eid.reshape(S * B, n, n), src, dst


def widest_paths_batch(rates: np.ndarray, batch: GraphBatch) -> WidestPaths:
    """Widest path for every (sample, band); result row ``s * B + b``."""
    return widest_paths_padded(*_batch_problems(rates, batch))


def widest_path(t: Topology, link_rates) -> tuple[list[int], float]:
    """Widest source-destination path for one band.

    ``link_rates`` is either an array aligned with ``t.directed_edges`` or a
    mapping ``{(i, j): rate}`` over directed links. Returns ``([], 0.0)`` when
    the destination is unreachable.
    """
    n = t.n
    R = np.full((1, n, n), -np.inf)
    eid = np.full((1, n, n), -1, dtype=np.intp)
    snd, rcv, _ = t.directed_edges
    if isinstance(link_rates, dict):
        vals = np.array([link_rates.get((int(i), int(j)), -np.inf) for i, j in zip(snd, rcv)])
    else:
        vals = np.asarray(link_rates, dtype=np.float64)
        if vals.shape != snd.shape:
            raise ValueError(f"expected {snd.size} directed rates, got {vals.shape}")
    R[0, snd, rcv] = vals
    eid[0, snd, rcv] = np.arange(snd.size)
    res = widest_paths_padded(R, eid, np.array([t.source]), np.array([t.destination]))
    return res.path(0), float(res.bottleneck[0])


# --- objectives -------------------------------------------------------------


@dataclass(frozen=True)
class RateReport:
    paths: list[list[int]]
    band_rates: np.ndarray

    @property
    def total(self) -> float:
        return float(self.band_rates.sum())


def true_objective_batch(q: np.ndarray, batch: GraphBatch) -> np.ndarray:
    """Exact objective per sample for directed-edge amplitudes ``q`` ``(D, B)``."""
    wp = widest_paths_batch(directed_rates(q, batch), batch)
    return wp.bottleneck.reshape(batch.n_samples, batch.n_bands).sum(axis=1)


def true_objective(P: PowerAllocation, csi: CsiTensor, t: Topology, check: bool = True) -> RateReport:
    if check:
        problems = feasibility_violations(P, t)
        if problems:
            raise InfeasibleAllocation("; ".join(problems))
    batch = GraphBatch.single(t, csi)
    q = P.to_directed(t)
    wp = widest_paths_batch(directed_rates(q, batch), batch)
    return RateReport([wp.path(b) for b in range(csi.n_bands)], wp.bottleneck.copy())


def smooth_min_segments(values: dt.Tensor, segments: np.ndarray, n_segments: int, tau: float) -> dt.Tensor:
    """``-tau * ln sum exp(-v / tau)`` over each segment of a 1-D tensor.

    Every segment must be non-empty.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    seg = np.asarray(segments, dtype=np.intp)
    shift = np.full(n_segments, np.inf)
    np.minimum.at(shift, seg, values.values)
    if not np.all(np.isfinite(shift)):
        raise ValueError("smooth-min over an empty segment")
    z = dt.exp((values - dt.Tensor(shift[seg])) * (-1.0 / tau))
    total = dt.segment_sum(z, seg, n_segments)
    return dt.Tensor(shift) - dt.log(total) * tau


def smooth_min(values, tau: float):
    """Smooth minimum of a non-empty list; returns a float, or a Tensor for Tensor input."""
    as_tensor = isinstance(values, dt.Tensor)
    v = values if as_tensor else dt.Tensor(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("smooth-min of an empty list")
    out = smooth_min_segments(v, np.zeros(v.size, dtype=np.intp), 1, tau)
    return out if as_tensor else float(out.values[0])


def surrogate_batch(q: dt.Tensor, batch: GraphBatch, tau: float,
                    rate_batch: GraphBatch | None = None) -> tuple[dt.Tensor, np.ndarray]:
    """Differentiable surrogate per sample, shape ``(S,)``, and the exact objective.

    Each band's path is the exact widest path at the current rates; the
    smooth-min then runs over that path's links only. ``rate_batch`` supplies
    the gains used for rates (defaults to ``batch``).
    """
    rb = batch if rate_batch is None else rate_batch
    rates = directed_rates_tensor(q, rb)
    if not np.all(np.isfinite(rates.values)):
        raise FloatingPointError("non-finite link rates")
    wp = widest_paths_batch(rates.values, rb)
    B = rb.n_bands
    exact = wp.bottleneck.reshape(rb.n_samples, B).sum(axis=1)
    has = np.flatnonzero(wp.hops > 0)
    hop_mask = np.arange(wp.edges.shape[1])[None, :] < wp.hops[has, None]
    prob, col = np.nonzero(hop_mask)
    k = has[prob]
    flat = wp.edges[k, col] * B + (k % B)
    seg_of_k = np.full(wp.hops.size, -1, dtype=np.intp)
    seg_of_k[has] = np.arange(has.size)
    picked = dt.gather(dt.reshape(rates, (-1,)), flat)
    sm = smooth_min_segments(picked, seg_of_k[k], has.size, tau)
    per_sample = dt.segment_sum(sm, has // B, rb.n_samples)
    return per_sample, exact


def surrogate_objective(P: PowerAllocation, csi: CsiTensor, t: Topology, tau: float) -> float:
    batch = GraphBatch.single(t, csi)
    val, _ = surrogate_batch(dt.Tensor(P.to_directed(t)), batch, tau)
    return float(val.values[0])


def directed_violations(q: np.ndarray, batch: GraphBatch, tol: float = FEASIBILITY_TOL) -> np.ndarray:
    """Per-sample infeasibility flags for directed-edge amplitudes ``(D, B)``."""
    bad_edge = (~np.isfinite(q) | (q < 0) | (q > 1 + tol)).any(axis=1)
    bad = np.zeros(batch.n_samples, dtype=bool)
    np.logical_or.at(bad, batch.edge_sample, bad_edge)
    sq = np.zeros(batch.n_nodes)
    np.add.at(sq, batch.senders, (q * q).sum(axis=1))
    np.logical_or.at(bad, batch.node_sample, np.sqrt(sq) > 1 + tol)
    return bad
