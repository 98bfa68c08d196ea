"""Unsupervised losses and the noisy-CSI-aware training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import difftensor as dt
from . import gnn
from .batch import GraphBatch
from .channel import CsiTensor, lmmse_estimate, perturb_csi
from .rateops import surrogate_batch
from .topology import Topology

log = logging.getLogger(__name__)

CSI_MODES = ("true", "perturbed", "lmmse")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainingConfig:
    lr: float = 1e-3
    lam: float = 0.1
    delta: float = 0.01
    tau: float = 0.1
    n_rounds: int = 4
    batch_size: int = 32
    n_batches: int | None = None      # Q; derived from batch_size when unset
    sigma_train: float = 0.1
    train_csi: str = "perturbed"      # what the forward pass sees
    n_pilots: int = 4
    epochs: int = 50
    seed: int = 0
    optimizer: str = "sgd"            # "sgd" as in the update rule, or "adam"
    clip_norm: float = 10.0
    tau_final: float | None = None    # geometric annealing target; off when None

    def __post_init__(self):
        if self.lr <= 0 or self.lam < 0 or self.delta < 0 or self.tau <= 0:
            raise ValueError("need lr > 0, lam >= 0, delta >= 0, tau > 0")
        if self.n_rounds < 2:
            raise ValueError("need at least two message rounds")
        if self.batch_size < 1 or (self.n_batches is not None and self.n_batches < 1):
            raise ValueError("batch size and batch count must be positive")
        if self.train_csi not in CSI_MODES:
            raise ValueError(f"train_csi must be one of {CSI_MODES}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.sigma_train < 0:
            raise ValueError("sigma_train must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def batches_for(self, n_samples: int) -> int:
        if self.n_batches is not None:
            return min(self.n_batches, n_samples)
        return max(1, math.ceil(n_samples / self.batch_size))

    def tau_at(self, epoch: int) -> float:
        if self.tau_final is None or self.epochs <= 1:
            return self.tau
        frac = epoch / (self.epochs - 1)
        return float(self.tau * (self.tau_final / self.tau) ** frac)


Sample = tuple[Topology, CsiTensor]


@dataclass
class LossBreakdown:
    rate: dt.Tensor
    mono: dt.Tensor
    total: dt.Tensor
    layer_rates: np.ndarray     # (L - 1,) batch-mean surrogate rate per layer
    exact_rate: float           # batch-mean exact objective of the final allocation

    @property
    def values(self) -> tuple[float, float, float]:
        return float(self.rate.values), float(self.mono.values), float(self.total.values)


def layer_surrogates(params: gnn.GnnParams, view: GraphBatch, truth: GraphBatch,
                     tau: float) -> tuple[list[dt.Tensor], np.ndarray]:
    """Per-sample surrogate rate ``(S,)`` of every layer's allocation, scored on ``truth``.

    Also returns the exact objective of the last layer's allocation.
    """
    states = gnn.forward(params, view)
    allocs = gnn.decode_per_layer(params, states, view)
    out, exact = [], None
    for q in allocs:
        s, exact = surrogate_batch(q, view, tau, rate_batch=truth)
        out.append(s)
    return out, exact


def _rate_term(surr: list[dt.Tensor]) -> dt.Tensor:
    return dt.mean_all(surr[-1]) * -1.0


def _mono_term(surr: list[dt.Tensor], delta: float) -> dt.Tensor:
    if len(surr) < 2:
        return dt.Tensor(0.0)
    terms = [dt.relu(dt.Tensor(delta) - (surr[l + 1] - surr[l])) for l in range(len(surr) - 1)]
    return dt.mean_all(dt.concat(terms, axis=0))


def rate_loss(params: gnn.GnnParams, view: GraphBatch, truth: GraphBatch | None = None,
              tau: float = 0.1) -> dt.Tensor:
    surr, _ = layer_surrogates(params, view, truth or view, tau)
    return _rate_term(surr)


def mono_loss(params: gnn.GnnParams, view: GraphBatch, truth: GraphBatch | None = None,
              tau: float = 0.1, delta: float = 0.01) -> dt.Tensor:
    """Mean margin penalty ``relu(delta - (R(l+1) - R(l)))`` over samples and layer pairs."""
    surr, _ = layer_surrogates(params, view, truth or view, tau)
    return _mono_term(surr, delta)


def total_loss(params: gnn.GnnParams, view: GraphBatch, truth: GraphBatch | None,
               cfg: TrainingConfig, tau: float | None = None) -> LossBreakdown:
    tau = cfg.tau if tau is None else tau
    surr, exact = layer_surrogates(params, view, truth or view, tau)
    rate = _rate_term(surr)
    mono = _mono_term(surr, cfg.delta)
    total = rate + mono * cfg.lam
    layer_rates = np.array([s.values.mean() for s in surr])
    return LossBreakdown(rate, mono, total, layer_rates, float(exact.mean()))


def csi_view(csi: CsiTensor, cfg: TrainingConfig, rng: np.random.Generator) -> CsiTensor:
    if cfg.train_csi == "perturbed":
        return perturb_csi(csi, cfg.sigma_train, rng)
    if cfg.train_csi == "lmmse":
        return lmmse_estimate(csi, cfg.n_pilots, rng)
    return csi


# --- optimizers -------------------------------------------------------------


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: list[dt.Tensor]) -> None:
        for p in params:
            if p.grad is not None:
                p.values -= self.lr * p.grad


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def step(self, params: list[dt.Tensor]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in enumerate(params):
            if p.grad is None:
                continue
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * p.grad
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * p.grad * p.grad
            self.m[k], self.v[k] = m, v
            if self.weight_decay:
                p.values -= self.lr * self.weight_decay * p.values
            p.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(params: list[dt.Tensor], max_norm: float) -> float:
    sq = sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# --- loop -------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    rate_loss: float
    mono_loss: float
    exact_rate: float
    wall_s: float


@dataclass
class TrainingTrace:
    epochs: list[EpochRecord] = field(default_factory=list)

    def rate_losses(self) -> np.ndarray:
        return np.array([r.rate_loss for r in self.epochs])


def gradient_step(params: gnn.GnnParams, view: GraphBatch, truth: GraphBatch,
                  cfg: TrainingConfig, tau: float | None = None) -> LossBreakdown:
    """Populate ``.grad`` of every parameter with the loss gradient on one batch."""
    params.zero_grad()
    try:
        with dt.ComputeTape() as tape:
            losses = total_loss(params, view, truth, cfg, tau)
    except FloatingPointError as err:
        raise TrainingDiverged(str(err), {"loss": None, "params": params.to_arrays()}) from err
    if not np.isfinite(losses.total.values):
        raise TrainingDiverged("non-finite loss", {"loss": losses.values, "params": params.to_arrays()})
    dt.backward(losses.total, tape)
    return losses


def train(params: gnn.GnnParams, dataset: list[Sample], cfg: TrainingConfig,
          progress=None) -> tuple[gnn.GnnParams, TrainingTrace]:
    """Algorithm: shuffle into Q batches each epoch, perturb the CSI the model
    sees, score against true CSI, and take one optimizer step per batch.

    ``params`` is copied, never modified.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if cfg.n_rounds != params.n_rounds:
        raise ValueError(f"config has L={cfg.n_rounds}, parameters were built for L={params.n_rounds}")
    params = params.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr) if cfg.optimizer == "adam" else Sgd(cfg.lr)
    trace = TrainingTrace()
    Q = cfg.batches_for(len(dataset))
    plist = params.parameters()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        tau = cfg.tau_at(epoch)
        order = rng.permutation(len(dataset))
        sums = np.zeros(3)
        for q, idx in enumerate(np.array_split(order, Q)):
            # dataset order inside a batch keeps float summation order fixed
            idx = np.sort(idx)
            samples = [dataset[i] for i in idx]
            truth = GraphBatch.from_samples([s[0] for s in samples], [s[1] for s in samples])
            view = truth if cfg.train_csi == "true" else truth.with_csis(
                [csi_view(s[1], cfg, rng) for s in samples])
            try:
                losses = gradient_step(params, view, truth, cfg, tau)
            except TrainingDiverged as err:
                err.snapshot.update(epoch=epoch, batch=q)
                raise
            clip_gradients(plist, cfg.clip_norm)
            opt.step(plist)
            r, m, _ = losses.values
            sums += np.array([r, m, losses.exact_rate]) * len(idx)
        sums /= len(dataset)
        rec = EpochRecord(epoch, sums[0], sums[1], sums[2], time.perf_counter() - t0)
        trace.epochs.append(rec)
        log.info("epoch %d rate_loss %.5f mono %.5f exact %.5f (%.1fs)",
                 epoch, rec.rate_loss, rec.mono_loss, rec.exact_rate, rec.wall_s)
        if progress is not None:
            progress(rec)
    params.zero_grad()
    return params, trace
