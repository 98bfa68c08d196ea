"""Reference allocators: centralized gradient solver, best single band, equal split."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import difftensor as dt
from .batch import GraphBatch
from .channel import CsiTensor
from .decentralized import LocalView
from .rateops import (
    PowerAllocation,
    directed_rates,
    project_feasible_directed,
    surrogate_batch,
    true_objective_batch,
    widest_paths_batch,
)
from .topology import Topology
from .training import Adam


class SolverDiverged(RuntimeError):
    pass


@dataclass
class SolverConfig:
    iterations: int = 500
    step: float = 0.05
    tau: float = 0.1
    tol: float = 0.0          # stop a restart early once the best objective stalls below this gain
    patience: int = 100
    restarts: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.step <= 0 or self.tau <= 0 or self.restarts < 1:
            raise ValueError("need iterations >= 1, step > 0, tau > 0, restarts >= 1")


# --- B2: centralized -------------------------------------------------------


def _solve_once(batch: GraphBatch, cfg: SolverConfig, rng: np.random.Generator):
    raw = dt.Tensor(rng.normal(0.0, 1.0, size=(batch.n_directed, batch.n_bands)), requires_grad=True)
    opt = Adam(cfg.step)
    best_val = np.full(batch.n_samples, -np.inf)
    best_q = np.zeros(raw.shape)
    stall = 0
    for _ in range(cfg.iterations):
        raw.grad = None
        try:
            with dt.ComputeTape() as tape:
                q = project_feasible_directed(dt.softplus(raw), batch)
                surr, exact = surrogate_batch(q, batch, cfg.tau)
                objective = dt.sum_all(surr) * -1.0
        except FloatingPointError as err:
            raise SolverDiverged(str(err)) from err
        if not np.all(np.isfinite(surr.values)):
            raise SolverDiverged(f"non-finite surrogate objective {surr.values}")
        improved = exact > best_val
        gain = np.where(np.isfinite(best_val), exact - best_val, np.inf)
        if improved.any():
            rows = improved[batch.edge_sample]
            best_q[rows] = q.values[rows]
            best_val = np.where(improved, exact, best_val)
        stall = 0 if np.any(gain > cfg.tol) else stall + 1
        if cfg.tol > 0 and stall >= cfg.patience:
            break
        dt.backward(objective, tape)
        opt.step([raw])
    return best_q, best_val


def centralized_solve_batch(batch: GraphBatch, cfg: SolverConfig | None = None) -> np.ndarray:
    """Best-of-restarts directed-edge amplitudes for every sample, using global CSI.

    Samples are independent: the summed objective separates and Adam acts
    elementwise, so batching changes nothing per instance.
    """
    cfg = cfg or SolverConfig()
    best_q = np.zeros((batch.n_directed, batch.n_bands))
    best_val = np.full(batch.n_samples, -np.inf)
    for r in range(cfg.restarts):
        q, val = _solve_once(batch, cfg, np.random.default_rng([cfg.seed, r]))
        better = val > best_val
        rows = better[batch.edge_sample]
        best_q[rows] = q[rows]
        best_val = np.where(better, val, best_val)
    return polish(best_q, batch)


def polish(q: np.ndarray, batch: GraphBatch) -> np.ndarray:
    """Move every node's budget onto the links its widest paths actually use.

    Softplus keeps a little power on every slot; zeroing the slots that no
    band's selected path uses and rescaling each node to unit norm only raises
    on-path amplitudes, so no bottleneck can drop.
    """
    wp = widest_paths_batch(directed_rates(q, batch), batch)
    B = batch.n_bands
    keep = np.zeros(q.shape, dtype=bool)
    for k in np.flatnonzero(wp.hops > 0):
        keep[wp.edges[k, :wp.hops[k]], k % B] = True
    out = np.where(keep, q, 0.0)
    sq = np.zeros(batch.n_nodes)
    np.add.at(sq, batch.senders, (out * out).sum(axis=1))
    norm = np.sqrt(sq)[batch.senders]
    out = np.divide(out, norm[:, None], out=np.zeros_like(out), where=norm[:, None] > 0)
    better = true_objective_batch(out, batch) >= true_objective_batch(q, batch)
    return np.where(better[batch.edge_sample][:, None], out, q)


def centralized_solve(csi: CsiTensor, t: Topology, cfg: SolverConfig | None = None) -> PowerAllocation:
    return PowerAllocation.from_directed(t, centralized_solve_batch(GraphBatch.single(t, csi), cfg))


# --- B3: best single band ---------------------------------------------------


@dataclass
class SingleBandChoice:
    band: np.ndarray          # (S,)
    bottleneck: np.ndarray    # (S,)
    q: np.ndarray             # (D, B)


def best_single_channel_batch(batch: GraphBatch) -> SingleBandChoice:
    """Full power on one band along its widest path; pick the band with the widest bottleneck."""
    S, B = batch.n_samples, batch.n_bands
    rates = directed_rates(np.ones((batch.n_directed, B)), batch)
    wp = widest_paths_batch(rates, batch)
    widths = wp.bottleneck.reshape(S, B)
    band = np.argmax(widths, axis=1)
    q = np.zeros((batch.n_directed, B))
    for s in range(S):
        k = s * B + band[s]
        hops = wp.edges[k, : wp.hops[k]]
        q[hops, band[s]] = 1.0
    return SingleBandChoice(band, widths[np.arange(S), band], q)


def best_single_channel(csi: CsiTensor, t: Topology) -> tuple[PowerAllocation, int]:
    res = best_single_channel_batch(GraphBatch.single(t, csi))
    return PowerAllocation.from_directed(t, res.q), int(res.band[0])


@dataclass
class BellmanFordResult:
    allocation: PowerAllocation
    band: int
    bottleneck: float
    rounds: int
    path: list[int]


def best_single_channel_bellman_ford(views: list[LocalView], noise_variance: np.ndarray,
                                     source: int, destination: int) -> BellmanFordResult:
    """Distributed max-min relaxation toward the destination, one B-vector per node per round.

    Each node only combines its own full-power link rates with the vectors its
    neighbors broadcast. The round at which the source's value first reaches
    its final level is the fewest-hop count, which lets the path be traced
    back through the per-round values each node keeps.
    """
    n = len(views)
    nv = np.asarray(noise_variance, dtype=np.float64)
    B = nv.size
    usable = [{j: np.where(np.abs(g) > 0, np.log2(1.0 + np.abs(g) ** 2 / nv), -np.inf)
               for j, g in v.gains.items()} for v in views]
    value = np.full((n, B), -np.inf)
    value[destination] = np.inf
    history = [value.copy()]
    rounds = 0
    for r in range(1, n):
        new = value.copy()
        for i in range(n):
            if i == destination:
                continue
            for j, rij in usable[i].items():
                new[i] = np.maximum(new[i], np.minimum(rij, value[j]))
        if np.array_equal(new, value):
            break
        value = new
        history.append(value.copy())
        rounds = r

    width = value[source]
    band = int(np.argmax(width))
    W = width[band]
    P = np.zeros((B, n, n))
    if not np.isfinite(W):
        return BellmanFordResult(PowerAllocation(P), band, 0.0, rounds, [])
    hops = next(k for k, h in enumerate(history) if h[source, band] == W)
    path = [source]
    u = source
    for left in range(hops - 1, -1, -1):
        nxt = min(j for j, rij in usable[u].items()
                  if min(rij[band], history[left][j, band]) >= W)
        P[band, u, nxt] = 1.0
        path.append(nxt)
        u = nxt
    return BellmanFordResult(PowerAllocation(P), band, float(W), rounds, path)


# --- B4: equal split --------------------------------------------------------


def equal_split_directed(batch: GraphBatch) -> np.ndarray:
    deg = np.bincount(batch.senders, minlength=batch.n_nodes).astype(np.float64)
    amp = 1.0 / np.sqrt(deg[batch.senders] * batch.n_bands)
    return np.repeat(amp[:, None], batch.n_bands, axis=1)


def equal_split(t: Topology, n_bands: int) -> PowerAllocation:
    P = np.zeros((n_bands, t.n, t.n))
    for i, j in t.edges:
        P[:, i, j] = 1.0 / np.sqrt(t.degree(i) * n_bands)
        P[:, j, i] = 1.0 / np.sqrt(t.degree(j) * n_bands)
    return PowerAllocation(P)


def score(q: np.ndarray, batch: GraphBatch) -> np.ndarray:
    return true_objective_batch(q, batch)
