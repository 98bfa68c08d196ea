"""Dataset generation, training drivers and evaluation sweeps."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import baselines, gnn, training
from ..batch import GraphBatch
from ..channel import CsiTensor, lmmse_estimate, perturb_csi, sample_rayleigh, snr_to_noise_variance
from ..rateops import directed_violations, true_objective_batch
from ..topology import generate_erdos_renyi
from . import io
from .config import ConfigError, ExperimentConfig

log = logging.getLogger(__name__)

TRAIN_SPLIT, TEST_SPLIT, VIEW_STREAM, INIT_STREAM = 0, 1, 2, 3
REFERENCE_SNR_DB = 0.0


class EvaluationError(RuntimeError):
    pass


# --- data -------------------------------------------------------------------


def split_rng(seed: int, split: int, *more: int) -> np.random.Generator:
    return np.random.default_rng([seed, split, *more])


def make_samples(n: int, n_bands: int, edge_prob: float, count: int, snr_db: float,
                 rng: np.random.Generator):
    out = []
    for _ in range(count):
        t = generate_erdos_renyi(n, edge_prob, rng)
        out.append((t, sample_rayleigh(t, n_bands, snr_db, rng)))
    return out


def retarget_snr(samples, snr_db: float):
    """Same topologies and gains with every band's noise set for ``snr_db``."""
    sigma2 = snr_to_noise_variance(snr_db)
    return [(t, CsiTensor(c.h, np.full(c.n_bands, sigma2))) for t, c in samples]


def generate_dataset(cfg: ExperimentConfig, split: str, path=None, n: int | None = None):
    """Draw the train or test split, optionally writing it; returns the samples.

    Gains do not depend on SNR, so one file at the reference SNR serves the
    whole grid via :func:`retarget_snr`.
    """
    split_id = TRAIN_SPLIT if split == "train" else TEST_SPLIT
    count = cfg.train_size if split == "train" else cfg.test_size
    n = n or cfg.n
    rng = split_rng(cfg.seed, split_id, n)
    samples = make_samples(n, cfg.n_bands, cfg.edge_prob, count, REFERENCE_SNR_DB, rng)
    if path is not None:
        meta = {"seed": cfg.seed, "split": split, "n": n, "n_bands": cfg.n_bands,
                "edge_prob": cfg.edge_prob, "snr_db": REFERENCE_SNR_DB, "count": count}
        io.write_dataset(path, samples, meta, [{"index": k} for k in range(count)])
    return samples


def batch_of(samples) -> GraphBatch:
    return GraphBatch.from_samples([s[0] for s in samples], [s[1] for s in samples])


def csi_views(samples, mode: str, rng: np.random.Generator, sigma: float = 0.0, n_pilots: int = 4):
    if mode == "true":
        return [c for _, c in samples]
    if mode == "perturbed":
        return [perturb_csi(c, sigma, rng) for _, c in samples]
    if mode == "lmmse":
        return [lmmse_estimate(c, n_pilots, rng) for _, c in samples]
    raise ConfigError(f"unknown CSI mode {mode!r}")


# --- training ---------------------------------------------------------------


def train_model(cfg: ExperimentConfig, samples, snr_db: float, tcfg: training.TrainingConfig | None = None,
                progress=None):
    tcfg = tcfg or cfg.training
    data = retarget_snr(samples, snr_db)
    params = gnn.init_params(cfg.n_bands, tcfg.n_rounds, split_rng(cfg.seed, INIT_STREAM))
    return training.train(params, data, tcfg, progress)


def save_trace(path, trace: training.TrainingTrace, deterministic: bool = False) -> None:
    """Write the per-epoch trace; deterministic runs record zero wall time."""
    io.write_csv(path, io.TRACE_HEADER,
                 [(r.epoch, r.rate_loss, r.mono_loss, 0.0 if deterministic else r.wall_s) for r in trace.epochs])


def load_model(path: Path, n_bands: int) -> gnn.GnnParams:
    if not Path(path).exists():
        raise ConfigError(f"missing checkpoint {path}")
    params, _ = io.read_checkpoint(path)
    if params.n_bands != n_bands:
        raise ConfigError(f"checkpoint {path} was trained for B={params.n_bands}, config has B={n_bands}")
    return params


# --- evaluation -------------------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    algorithm: str
    snr_db: float
    mean_rate: float
    stderr: float
    n_samples: int
    wall_ms: float

    def as_tuple(self):
        return (self.algorithm, self.snr_db, self.mean_rate, self.stderr, self.n_samples, self.wall_ms)


def summarize(algorithm: str, snr_db: float, rates: np.ndarray, wall_ms: float) -> ResultRow:
    n = rates.size
    err = float(rates.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return ResultRow(algorithm, float(snr_db), float(rates.mean()), err, n, wall_ms)


def allocate(algorithm: str, view: GraphBatch, params: gnn.GnnParams | None,
             solver: baselines.SolverConfig) -> np.ndarray:
    """Directed-edge amplitudes chosen by ``algorithm`` from the CSI in ``view``."""
    if algorithm == "gnn":
        return gnn.allocate_batch(params, view)
    if algorithm == "centralized":
        return baselines.centralized_solve_batch(view, solver)
    if algorithm == "single_channel":
        return baselines.best_single_channel_batch(view).q
    if algorithm == "equal_split":
        return baselines.equal_split_directed(view)
    raise ConfigError(f"unknown algorithm {algorithm!r}")


def score_allocation(q: np.ndarray, truth: GraphBatch) -> np.ndarray:
    """Feasibility-checked exact rates, always on the true gains in ``truth``."""
    bad = directed_violations(q, truth)
    if bad.any():
        raise EvaluationError(f"infeasible allocation for samples {np.flatnonzero(bad).tolist()}")
    return true_objective_batch(q, truth)


def evaluate_point(cfg: ExperimentConfig, samples, snr_db: float, snr_index: int,
                   models: dict[str, gnn.GnnParams], algorithms: list[str]) -> list[ResultRow]:
    data = retarget_snr(samples, snr_db)
    truth = batch_of(data)
    views = csi_views(data, cfg.csi_mode, split_rng(cfg.seed, VIEW_STREAM, snr_index),
                      cfg.training.sigma_train, cfg.n_pilots)
    view = truth if cfg.csi_mode == "true" else truth.with_csis(views)
    rows = []
    for name in algorithms:
        t0 = time.perf_counter()
        base = "gnn" if name.startswith("gnn") else name
        q = allocate(base, view, models.get(name), cfg.solver)
        wall = 0.0 if cfg.deterministic else (time.perf_counter() - t0) * 1e3
        rows.append(summarize(name, snr_db, score_allocation(q, truth), wall))
        log.info("%s @ %g dB: %.5f", name, snr_db, rows[-1].mean_rate)
    return rows


def _models_for(cfg: ExperimentConfig, snr_db: float, templates: dict[str, str | None]):
    return {name: load_model(cfg.checkpoint_for(tpl, snr_db), cfg.n_bands) for name, tpl in templates.items()}


def _run_grid(cfg: ExperimentConfig, samples, templates: dict[str, str | None],
              algorithms: list[str]) -> list[ResultRow]:
    # resolve checkpoints up front so a missing file fails before any compute
    models = {snr: _models_for(cfg, snr, templates) for snr in cfg.snr_grid}
    jobs = [(cfg, samples, snr, k, models[snr], algorithms) for k, snr in enumerate(cfg.snr_grid)]
    if cfg.deterministic or cfg.workers <= 1:
        parts = [evaluate_point(*job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            parts = list(pool.map(_evaluate_job, jobs))
    return [row for part in parts for row in part]


def _evaluate_job(job):
    return evaluate_point(*job)


def run_sweep(cfg: ExperimentConfig, samples=None) -> list[ResultRow]:
    samples = samples if samples is not None else generate_dataset(cfg, "test")
    # estimated-CSI sweeps use the noisy-aware model when one is configured
    noisy = cfg.csi_mode != "true" and cfg.checkpoint_noisy is not None
    templates = {"gnn": cfg.checkpoint_noisy if noisy else cfg.checkpoint} if "gnn" in cfg.algorithms else {}
    return _run_grid(cfg, samples, templates, list(cfg.algorithms))


def write_results(path, rows: list[ResultRow]) -> None:
    io.write_csv(path, io.RESULT_HEADER, [r.as_tuple() for r in rows])


@dataclass
class PairedResult:
    rows: list[ResultRow]
    comparison: list[tuple]     # (snr_db, first, second, derived)
    sample_ids: list[int]


def _paired(cfg: ExperimentConfig, samples, names: tuple[str, str], templates, derive) -> PairedResult:
    rows = _run_grid(cfg, samples, dict(zip(names, templates)), list(names))
    by = {(r.algorithm, r.snr_db): r.mean_rate for r in rows}
    comp = [(snr, by[(names[0], snr)], by[(names[1], snr)], derive(by[(names[0], snr)], by[(names[1], snr)]))
            for snr in cfg.snr_grid]
    return PairedResult(rows, comp, list(range(len(samples))))


def relative_gap(small: float, full: float) -> float:
    return abs(small - full) / full if full > 0 else float("inf")


def run_scalability(cfg: ExperimentConfig, samples=None) -> PairedResult:
    """Small-graph model vs. full-size model, both on the same ``n``-node test set.

    The comparison column is the relative gap ``|small - full| / full``.
    """
    samples = samples if samples is not None else generate_dataset(cfg, "test")
    for tpl in (cfg.checkpoint, cfg.checkpoint_small):
        if tpl is None:
            raise ConfigError("scalability needs checkpoint and checkpoint_small")
    B = {load_model(cfg.checkpoint_for(t, s), cfg.n_bands).n_rounds
         for t in (cfg.checkpoint, cfg.checkpoint_small) for s in cfg.snr_grid}
    if len(B) != 1:
        raise ConfigError("checkpoints disagree on the number of message rounds")
    return _paired(cfg, samples, ("gnn_small", "gnn_full"),
                   (cfg.checkpoint_small, cfg.checkpoint), relative_gap)


def run_csi_robustness(cfg: ExperimentConfig, samples=None) -> PairedResult:
    """Clean-trained vs. noisy-aware model, both tested on true CSI; ratio noisy / clean."""
    samples = samples if samples is not None else generate_dataset(cfg, "test")
    if cfg.checkpoint is None or cfg.checkpoint_noisy is None:
        raise ConfigError("robustness needs checkpoint and checkpoint_noisy")
    true_cfg = ExperimentConfig(**{**cfg.__dict__, "csi_mode": "true"})
    return _paired(true_cfg, samples, ("gnn_clean", "gnn_noisy"),
                   (cfg.checkpoint, cfg.checkpoint_noisy),
                   lambda clean, noisy: noisy / clean if clean > 0 else float("nan"))
