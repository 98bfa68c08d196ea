"""Command line entry point: ``manetpower <subcommand> CONFIG [--set key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .. import baselines, gnn
from ..decentralized import local_views
from ..rateops import true_objective
from . import experiments as ex
from . import io
from .config import ConfigError, ExperimentConfig, load_config, parse_override

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("manetpower")


def _load(args) -> ExperimentConfig:
    overrides = dict(parse_override(s) for s in args.set or [])
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    if args.deterministic:
        overrides["deterministic"] = True
    return load_config(args.config, overrides)


def _test_samples(cfg: ExperimentConfig, args):
    if getattr(args, "dataset", None):
        samples, _ = io.read_dataset(args.dataset)
        return samples
    return ex.generate_dataset(cfg, "test")


def cmd_gen_data(cfg: ExperimentConfig, args) -> None:
    out = cfg.out
    for split in args.splits:
        path = out / f"{split}.json"
        ex.generate_dataset(cfg, split, path)
        print(f"wrote {path}")


def cmd_train(cfg: ExperimentConfig, args) -> None:
    template, n, tcfg = cfg.model_spec(args.model)
    if template is None:
        raise ConfigError(f"training the {args.model} model needs its checkpoint path (may contain {{snr_db}})")
    if args.dataset:
        samples, _ = io.read_dataset(args.dataset)
    else:
        samples = ex.generate_dataset(cfg, "train", n=n)
    snrs = cfg.snr_grid if "{snr_db}" in template else [cfg.snr_grid[0]]
    for snr in snrs:
        params, trace = ex.train_model(cfg, samples, snr, tcfg)
        path = cfg.checkpoint_for(template, snr)
        io.write_checkpoint(path, params, tcfg.to_dict(),
                            {"snr_db": snr, "train_n": samples[0][0].n, "train_size": len(samples)})
        ex.save_trace(path.with_suffix(".trace.csv"), trace, cfg.deterministic)
        print(f"wrote {path}")


def cmd_sweep(cfg: ExperimentConfig, args) -> None:
    rows = ex.run_sweep(cfg, _test_samples(cfg, args))
    path = cfg.out / f"sweep_{cfg.csi_mode}.csv"
    ex.write_results(path, rows)
    print(io.csv_text(io.RESULT_HEADER, [r.as_tuple() for r in rows]), end="")


def _write_paired(cfg, res: ex.PairedResult, stem: str, derived: str) -> None:
    ex.write_results(cfg.out / f"{stem}.csv", res.rows)
    io.write_csv(cfg.out / f"{stem}_compare.csv", ("snr_db", "first", "second", derived), res.comparison)
    (cfg.out / f"{stem}_samples.json").write_text(json.dumps({"sample_ids": res.sample_ids}) + "\n")
    print(io.csv_text(("snr_db", "first", "second", derived), res.comparison), end="")


def cmd_scale(cfg: ExperimentConfig, args) -> None:
    _write_paired(cfg, ex.run_scalability(cfg, _test_samples(cfg, args)), "scalability", "relative_gap")


def cmd_robust(cfg: ExperimentConfig, args) -> None:
    _write_paired(cfg, ex.run_csi_robustness(cfg, _test_samples(cfg, args)), "robustness", "ratio")


def cmd_baseline(cfg: ExperimentConfig, args) -> None:
    samples = ex.retarget_snr(_test_samples(cfg, args), cfg.snr_grid[0])
    name = args.algorithm
    allocs = []
    for t, csi in samples:
        if name == "centralized":
            P = baselines.centralized_solve(csi, t, cfg.solver)
        elif name == "single_channel":
            P, _ = baselines.best_single_channel(csi, t)
        elif name == "single_channel_bf":
            P = baselines.best_single_channel_bellman_ford(
                local_views(t, csi), csi.noise_variance, t.source, t.destination).allocation
        elif name == "equal_split":
            P = baselines.equal_split(t, csi.n_bands)
        elif name == "gnn":
            params = ex.load_model(cfg.checkpoint_for(cfg.checkpoint, cfg.snr_grid[0]), cfg.n_bands)
            P = gnn.allocate(params, t, csi)
        else:
            raise ConfigError(f"unknown algorithm {name!r}")
        allocs.append(P)
    rates = [true_objective(P, c, t).total for P, (t, c) in zip(allocs, samples)]
    path = cfg.out / f"allocations_{name}.json"
    io.write_allocations(path, name, allocs, [t for t, _ in samples], rates)
    print(f"wrote {path}; mean rate {sum(rates) / len(rates):.6g}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "scale": cmd_scale,
    "robust": cmd_robust,
    "baseline": cmd_baseline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="manetpower", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="YAML or JSON experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, dotted for nested (training.lr=0.01)")
        p.add_argument("--output-dir")
        p.add_argument("--deterministic", action="store_true", help="serial evaluation, zeroed wall times")
        if name != "gen-data":
            p.add_argument("--dataset", help="dataset file to use instead of regenerating")
        if name == "train":
            p.add_argument("--model", choices=["main", "small", "noisy"], default="main",
                           help="which checkpoint to train (small: small_n nodes; noisy: noisy_train_csi inputs)")
        if name == "gen-data":
            p.add_argument("--splits", nargs="+", default=["train", "test"], choices=["train", "test"])
        if name == "baseline":
            p.add_argument("algorithm", choices=["centralized", "single_channel", "single_channel_bf",
                                                 "equal_split", "gnn"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _load(args)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, io.FormatError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("failure", exc_info=True)
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
