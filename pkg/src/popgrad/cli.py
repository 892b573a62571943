"""Command-line entry point.

    popgrad <subcommand> --config PATH [--out DIR] [--seed N] [--workers N] [--data DIR]

Subcommands: train, tune, compare, combine, long, widths, gradqual, landscape.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric divergence,
5 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as X
from .config import ExperimentConfig, TrainConfig, dump_config, parse_config
from .errors import ConfigError, DataError, NumericDivergenceError
from .harness import load_datasets, prepare, run_training
from .landscape import SliceSpec, make_slice
from .models import load_checkpoint, save_checkpoint
from .population import gradient_quality

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_INTERNAL = 0, 2, 3, 4, 5
COMMANDS = ("train", "tune", "compare", "combine", "long", "widths", "gradqual", "landscape")

log = logging.getLogger("popgrad")


def build_parser():
    parser = argparse.ArgumentParser(prog="popgrad", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", type=Path, default=Path("out"))
        p.add_argument("--seed", type=int, default=None, help="override the base config seed")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--data", type=Path, default=None,
                       help="dataset root (falls back to $POPGRAD_DATA)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _load(path, command, seed):
    cfg = parse_config(path)
    if command == "train":
        if isinstance(cfg, ExperimentConfig):
            cfg = cfg.base
    elif isinstance(cfg, TrainConfig):
        cfg = ExperimentConfig(base=cfg)
    if seed is not None:
        if isinstance(cfg, TrainConfig):
            cfg = replace(cfg, seed=seed)
        else:
            cfg = replace(cfg, base=replace(cfg.base, seed=seed))
    return cfg


def _write_json(path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _train(cfg, args):
    record, model, params = run_training(cfg, data_root=args.data, workers=args.workers,
                                         return_params=True)
    runs = args.out / "runs"
    record.write(runs)
    save_checkpoint(runs / f"{record.run_id}.ckpt", model, params, seed=cfg.seed)
    dump_config(cfg, args.out / "config.json")
    if record.failed:
        log.error("run diverged: %s", record.failure)
        return EXIT_DIVERGED
    return EXIT_OK


def _tune(cfg, args):
    result = X.random_search(cfg.grid, cfg.n_draws, cfg.base, cfg.base.seed,
                             workers=args.workers, data_root=args.data)
    for rec in result.records:
        rec.write(args.out / "runs")
    X.write_rows(args.out / "tune.csv", result.rows())
    if result.best_config is not None:
        dump_config(result.best_config, args.out / "best_config.json")
    return EXIT_OK


def _compare(cfg, args):
    comp = X.compare_methods(list(cfg.methods), cfg.meta_grids, cfg.base,
                             workers=args.workers, data_root=args.data)
    comp.baseline.write(args.out / "baseline")
    for records in comp.records.values():
        for rec in records:
            rec.write(args.out / "runs")
    comp.write_csv(args.out / "compare.csv")
    return EXIT_OK


def _combine(cfg, args):
    if cfg.pg is None:
        raise ConfigError("combine needs a fixed 'pg' block")
    baseline = None
    rows = []
    for method in cfg.methods:
        grid = (cfg.meta_grids or {}).get(method)
        comp = X.combine_with_pg(method, grid, cfg.pg, cfg.base, workers=args.workers,
                                 data_root=args.data, baseline=baseline)
        baseline = comp.baseline
        for records in comp.records.values():
            for rec in records:
                rec.write(args.out / "runs")
        rows += comp.rows
    if baseline is not None:
        baseline.write(args.out / "baseline")
    X.write_rows(args.out / "combine.csv", rows, X.CSV_COLUMNS)
    return EXIT_OK


def _long(cfg, args):
    pg = cfg.pg or cfg.base.popgrad
    if pg is None:
        raise ConfigError("long needs a 'pg' block (or base.popgrad)")
    base = replace(cfg.base, popgrad=None)
    result = X.long_training(base, pg, cfg.window, workers=args.workers, data_root=args.data)
    result.baseline.write(args.out / "runs")
    result.pg.write(args.out / "runs")
    X.write_rows(args.out / "long_bins.csv", result.bins(),
                 ["method", "first_epoch", "last_epoch", "mean_f1", "sd_f1", "run_id"])
    return EXIT_OK


def _widths(cfg, args):
    sweep = X.width_sweep(cfg.multipliers, cfg.pg_grid, cfg.base, workers=args.workers,
                          data_root=args.data)
    for entry in sweep:
        entry["baseline"].write(args.out / "runs")
        for _, _, rec in entry["pg"]:
            rec.write(args.out / "runs")
    X.write_rows(args.out / "widths.csv", X.width_rows(sweep))
    return EXIT_OK


def _model_and_data(cfg, args):
    """Trained (or checkpointed) model, parameters and normalized training arrays."""
    base = cfg.base
    model, params, train, _, _ = prepare(base, load_datasets(base.dataset, args.data))
    if cfg.checkpoint:
        model, params, _ = load_checkpoint(cfg.checkpoint)
    else:
        record, model, params = run_training(base, data_root=args.data, workers=args.workers,
                                             return_params=True)
        record.write(args.out / "runs")
        if record.failed:
            raise NumericDivergenceError("training diverged before analysis")
    return model, params, train


def _gradqual(cfg, args):
    model, params, (x, y) = _model_and_data(cfg, args)
    rng = np.random.default_rng([cfg.base.seed, 7])
    report = gradient_quality(model, params, (x, y), cfg.subset_size, cfg.repeats, rng)
    payload = {"standard": report.to_dict()}
    pg = cfg.pg or cfg.base.popgrad
    if pg is not None:
        rng = np.random.default_rng([cfg.base.seed, 7])
        pg_report = gradient_quality(model, params, (x, y), cfg.subset_size, cfg.repeats, rng,
                                     spec=pg, seed=cfg.base.seed)
        payload["population"] = pg_report.to_dict()
    _write_json(args.out / "gradqual.json", payload)
    return EXIT_OK


def _landscape(cfg, args):
    model, params, (x, y) = _model_and_data(cfg, args)
    spec = SliceSpec(**{k: tuple(v) if isinstance(v, list) else v
                        for k, v in (cfg.slice or {}).items()})
    idx = np.random.default_rng([spec.seed, 0]).choice(len(y), size=min(spec.batch_size, len(y)),
                                                       replace=False)
    sl = make_slice(model, params, (x[idx], y[idx]), spec)
    args.out.mkdir(parents=True, exist_ok=True)
    sl.write_csv(args.out / "slice.csv")
    sl.write_arrows(args.out / "arrows.json")
    sl.write_ppm(args.out / "slice.ppm")
    return EXIT_OK


HANDLERS = {
    "train": _train, "tune": _tune, "compare": _compare, "combine": _combine,
    "long": _long, "widths": _widths, "gradqual": _gradqual, "landscape": _landscape,
}


def dispatch(args):
    try:
        cfg = _load(args.config, args.command, args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericDivergenceError as exc:
        log.error("numeric divergence: %s", exc)
        return EXIT_DIVERGED
    except Exception:  # noqa: BLE001 - top-level guard maps to exit code 5
        log.exception("internal error")
        return EXIT_INTERNAL


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return dispatch(args)


if __name__ == "__main__":
    sys.exit(main())
