"""Versioned JSON containers for datasets, checkpoints, allocations and CSV tables.

Floats go through ``json`` (shortest round-trip repr), keys are sorted and
separators fixed, so equal content always yields equal bytes.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from ..channel import CsiTensor
from ..gnn import GnnParams
from ..rateops import PowerAllocation
from ..topology import Topology

DATASET_FORMAT = "manetpower-dataset"
CHECKPOINT_FORMAT = "manetpower-checkpoint"
ALLOCATION_FORMAT = "manetpower-allocations"
VERSION = 1

RESULT_HEADER = ("algorithm", "snr_db", "mean_rate", "stderr", "n_samples", "wall_ms")
TRACE_HEADER = ("epoch", "mean_rate_loss", "mean_mono_loss", "wall_s")


class FormatError(ValueError):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def _write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _load(path, expected: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise FormatError(f"cannot read {path}: {err}") from err
    if not isinstance(doc, dict) or doc.get("format") != expected:
        found = doc.get("format") if isinstance(doc, dict) else type(doc).__name__
        raise FormatError(f"{path}: expected format {expected!r}, found {found!r}")
    if doc.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported version {doc.get('version')!r}")
    return doc


# --- dataset ----------------------------------------------------------------


def sample_to_record(t: Topology, csi: CsiTensor, meta: dict | None = None) -> dict:
    return {
        "n": t.n,
        "edges": [list(e) for e in t.edges],
        "source": t.source,
        "destination": t.destination,
        "noise_variance": csi.noise_variance.tolist(),
        # (band, edge, [re, im])
        "h": np.stack([csi.h.real, csi.h.imag], axis=-1).tolist(),
        "meta": meta or {},
    }


def record_to_sample(rec: dict) -> tuple[Topology, CsiTensor]:
    t = Topology(rec["n"], tuple(tuple(e) for e in rec["edges"]), rec["source"], rec["destination"])
    h = np.asarray(rec["h"], dtype=np.float64).reshape(len(rec["noise_variance"]), t.n_edges, 2)
    csi = CsiTensor(h[..., 0] + 1j * h[..., 1], np.asarray(rec["noise_variance"]))
    return t, csi


def write_dataset(path, samples, meta: dict, sample_meta: list[dict] | None = None) -> None:
    sample_meta = sample_meta or [{} for _ in samples]
    doc = {
        "format": DATASET_FORMAT,
        "version": VERSION,
        "meta": meta,
        "samples": [sample_to_record(t, c, m) for (t, c), m in zip(samples, sample_meta)],
    }
    _write_text(path, _dump(doc))


def read_dataset(path) -> tuple[list[tuple[Topology, CsiTensor]], dict]:
    doc = _load(path, DATASET_FORMAT)
    return [record_to_sample(r) for r in doc["samples"]], doc["meta"]


# --- checkpoint -------------------------------------------------------------


def write_checkpoint(path, params: GnnParams, training_config: dict, extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": VERSION,
        "n_bands": params.n_bands,
        "n_rounds": params.n_rounds,
        "training_config": training_config,
        "extra": extra or {},
        "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                   for k, v in params.to_arrays().items()},
    }
    _write_text(path, _dump(doc))


def read_checkpoint(path) -> tuple[GnnParams, dict]:
    doc = _load(path, CHECKPOINT_FORMAT)
    arrays = {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"])
              for k, v in doc["params"].items()}
    params = GnnParams.from_arrays(doc["n_bands"], doc["n_rounds"], arrays)
    return params, doc


# --- allocations ------------------------------------------------------------


def write_allocations(path, algorithm: str, allocations: list[PowerAllocation],
                      topologies: list[Topology], rates: list[float]) -> None:
    items = []
    for k, (P, t, r) in enumerate(zip(allocations, topologies, rates)):
        snd, rcv, _ = t.directed_edges
        items.append({
            "sample": k,
            "links": [[int(i), int(j)] for i, j in zip(snd, rcv)],
            "amplitudes": P.to_directed(t).tolist(),   # (link, band)
            "rate": r,
        })
    _write_text(path, _dump({"format": ALLOCATION_FORMAT, "version": VERSION,
                             "algorithm": algorithm, "allocations": items}))


def read_allocations(path) -> dict:
    return _load(path, ALLOCATION_FORMAT)


# --- CSV --------------------------------------------------------------------


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_csv(path, header, rows) -> None:
    _write_text(path, csv_text(header, rows))


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
