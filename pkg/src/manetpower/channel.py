"""Multi-band Rayleigh CSI, training-time perturbation and pilot-based LMMSE estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .topology import Topology

PRIOR_VARIANCE = 1.0


def snr_to_noise_variance(snr_db: float) -> float:
    """Unit channel variance and unit power budget, so sigma^2 = 1 / SNR."""
    if not np.isfinite(snr_db):
        raise ValueError(f"SNR must be finite, got {snr_db}")
    return float(10.0 ** (-snr_db / 10.0))


@dataclass(frozen=True, eq=False)
class CsiTensor:
    """Reciprocal channel gains for every (band, undirected edge).

    ``h[b, k]`` is the gain of ``topology.edges[k]`` on band ``b`` in both
    directions.
    """

    h: np.ndarray
    noise_variance: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.complex128)
        if h.ndim != 2:
            raise ValueError("h must be (bands, edges)")
        nv = np.broadcast_to(np.asarray(self.noise_variance, dtype=np.float64), (h.shape[0],)).copy()
        if np.any(nv <= 0):
            raise ValueError("noise variance must be positive on every band")
        h.setflags(write=False)
        nv.setflags(write=False)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "noise_variance", nv)

    @property
    def n_bands(self) -> int:
        return self.h.shape[0]

    @property
    def n_edges(self) -> int:
        return self.h.shape[1]

    def gain(self, b: int, t: Topology, i: int, j: int) -> complex:
        k = t.edges.index((min(i, j), max(i, j)))
        return complex(self.h[b, k])

    def matches(self, t: Topology) -> bool:
        return self.n_edges == t.n_edges

    def with_gains(self, h: np.ndarray) -> "CsiTensor":
        return CsiTensor(h, self.noise_variance)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CsiTensor):
            return NotImplemented
        return (np.array_equal(self.h, other.h)
                and np.array_equal(self.noise_variance, other.noise_variance))


def complex_normal(rng: np.random.Generator, shape, variance: float = 1.0) -> np.ndarray:
    """Circularly-symmetric CN(0, variance) draws."""
    scale = np.sqrt(variance / 2.0)
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return scale * (re + 1j * im)


def sample_rayleigh(t: Topology, n_bands: int, snr_db: float, rng: np.random.Generator) -> CsiTensor:
    if n_bands < 1:
        raise ValueError("need at least one band")
    sigma2 = snr_to_noise_variance(snr_db)
    h = complex_normal(rng, (n_bands, t.n_edges), PRIOR_VARIANCE)
    return CsiTensor(h, np.full(n_bands, sigma2))


def perturb_csi(csi: CsiTensor, sigma_train: float, rng: np.random.Generator) -> CsiTensor:
    """Add CN(0, sigma_train^2) to every gain. ``sigma_train == 0`` returns ``csi`` itself."""
    if sigma_train < 0:
        raise ValueError("perturbation amplitude must be non-negative")
    if sigma_train == 0:
        return csi
    return csi.with_gains(csi.h + complex_normal(rng, csi.h.shape, sigma_train ** 2))


def lmmse_shrinkage(noise_variance, n_pilots: int, prior_variance: float = PRIOR_VARIANCE):
    return prior_variance / (prior_variance + np.asarray(noise_variance) / n_pilots)


def lmmse_mse(noise_variance, n_pilots: int, prior_variance: float = PRIOR_VARIANCE):
    """Theoretical error variance of :func:`lmmse_estimate`."""
    eff = np.asarray(noise_variance) / n_pilots
    return prior_variance * eff / (prior_variance + eff)


def lmmse_estimate(csi: CsiTensor, n_pilots: int, rng: np.random.Generator) -> CsiTensor:
    """Estimate each gain from ``n_pilots`` unit pilots observed in the band's noise."""
    if n_pilots < 1:
        raise ValueError("need at least one pilot")
    nv = csi.noise_variance[:, None]
    # the mean of n pilots y_k = h + w_k is h + CN(0, sigma^2 / n)
    noise = complex_normal(rng, (n_pilots,) + csi.h.shape, 1.0) * np.sqrt(nv)
    y_mean = csi.h + noise.mean(axis=0)
    return csi.with_gains(lmmse_shrinkage(nv, n_pilots) * y_mean)
