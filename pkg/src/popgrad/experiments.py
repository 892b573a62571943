"""Multi-run experiments: random search, method comparison, combination with
population gradients, long-training binning and width sweeps.

Independent runs can be spread over worker processes; results are always
collected in submission order, so the output does not depend on the worker
count.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import (DropoutConfig, L1Config, L2Config, LRDecayConfig, TrainConfig,
                     config_to_dict, with_updates)
from .errors import ConfigError, UsageError
from .harness import RunRecord, bin_f1, config_digest, run_training
from .optim import KINDS as OPTIMIZERS
from .population import PopulationGradSpec

DEFAULT_SEARCH_GRID = {
    "lr": [0.002, 0.005, 0.01, 0.02, 0.05],
    "batch_size": [64, 128, 256, 512],
    "pads_length": [0, 1, 2, 4, 8],
    "pads_type": ["zeros", "border", "reflection"],
    "hflip": [False, True],
    "norm_mean": [0.1, 0.2, 0.4, 0.8, None],
    "norm_sd": [0.1, 0.2, 0.4, 0.8, None],
}

_MOMENTA = [0.1, 0.5, 0.9, 0.99]
_SECOND = [0.991, 0.995, 0.999, 0.9999]
_REG = [1e-5, 1e-4, 0.001, 0.01, 0.1]

DEFAULT_META_GRIDS = {
    "pg": [[5, 10], [0.05, 0.1, 0.2, 0.4]],
    "lr_decay": [[2, 5, 10, 20], [0.9, 0.7, 0.5, 0.2]],
    "dropout": [[0.0, 0.1, 0.2, 0.4], [0.0, 0.1, 0.2, 0.4]],
    "l1": [_REG, _REG],
    "l2": [_REG, _REG],
    "nesterov": [_MOMENTA, _SECOND],
    "rmsprop": [_MOMENTA, _SECOND],
    "adamw": [_MOMENTA, _SECOND],
    "adam": [_MOMENTA, _SECOND],
    "amsgrad": [_MOMENTA, _SECOND],
    "adamax": [_MOMENTA, _SECOND],
}

WIDTH_MULTIPLIERS = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5)
WIDTH_PG_GRID = {"population_size": [5, 7, 9], "population_range": [0.05, 0.1, 0.2, 0.4, 0.6]}

CSV_COLUMNS = ["method", "meta1", "meta2", "mean_f1", "sd_f1", "improvement"]


# ---------------------------------------------------------------------------
# running


def _run_job(job):
    config, label, data_root = job
    try:
        return run_training(config, data_root=data_root, label=label)
    except ConfigError as exc:
        cfg = config_to_dict(config)
        return RunRecord(f"{label}-{config_digest(cfg)}", cfg,
                         failure={"kind": "config_error", "message": str(exc)})


def run_many(jobs, workers=1, data_root=None):
    """Run ``[(config, label), ...]``; records come back in job order."""
    payload = [(cfg, label, data_root) for cfg, label in jobs]
    if workers > 1 and len(payload) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_job, payload))
    return [_run_job(p) for p in payload]


def _best(records):
    """Index of the highest last-10 mean F1; earliest wins ties."""
    best, best_val = None, -math.inf
    for i, rec in enumerate(records):
        if rec.mean_f1 is not None and rec.mean_f1 > best_val:
            best, best_val = i, rec.mean_f1
    return best


# ---------------------------------------------------------------------------
# random search


def _apply_axis(config, axis, value):
    if axis == "lr":
        return with_updates(config, optimizer__lr=value)
    if axis == "batch_size":
        return replace(config, batch_size=int(value))
    if axis in ("pads_length", "pads_type", "hflip", "norm_mean", "norm_sd"):
        if axis == "pads_length":
            value = int(value)
        return with_updates(config, **{f"augment__{axis}": value})
    raise ConfigError(f"unknown search axis {axis!r}")


def grid_cardinality(grid):
    if any(len(v) == 0 for v in grid.values()):
        raise UsageError("every grid axis needs at least one value")
    return math.prod(len(v) for v in grid.values())


def decode_draw(grid, index):
    """Mixed-radix decoding of a flat grid index (last axis fastest)."""
    combo = {}
    for axis in reversed(list(grid)):
        values = grid[axis]
        index, r = divmod(index, len(values))
        combo[axis] = values[r]
    return {axis: combo[axis] for axis in grid}


@dataclass
class SearchResult:
    best_config: TrainConfig | None
    best_index: int | None
    draws: list  # list of {axis: value}
    records: list

    def rows(self):
        out = []
        for i, (combo, rec) in enumerate(zip(self.draws, self.records)):
            out.append({"draw": i, **combo, "mean_f1": rec.mean_f1, "sd_f1": rec.sd_f1,
                        "run_id": rec.run_id})
        return out


def search_draws(grid, n_draws, seed):
    card = grid_cardinality(grid)
    if n_draws > card:
        raise UsageError(f"n_draws={n_draws} exceeds grid cardinality {card}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(card, size=n_draws, replace=False)
    return [decode_draw(grid, int(i)) for i in picks]


def random_search(grid, n_draws, base_config, seed, workers=1, data_root=None):
    """Evaluate ``n_draws`` distinct grid cells drawn uniformly without replacement."""
    grid = DEFAULT_SEARCH_GRID if grid is None else grid
    draws = search_draws(grid, n_draws, seed)
    configs = []
    for combo in draws:
        cfg = base_config
        for axis, value in combo.items():
            cfg = _apply_axis(cfg, axis, value)
        configs.append(cfg)
    jobs = [(cfg, f"tune{i:04d}") for i, cfg in enumerate(configs)]
    records = run_many(jobs, workers, data_root)
    best = _best(records)
    return SearchResult(None if best is None else configs[best], best, draws, records)


# ---------------------------------------------------------------------------
# method comparison


def apply_method(config, method, v1=None, v2=None):
    """``config`` with one method block switched on at meta-parameters (v1, v2)."""
    if method in (None, "none"):
        return config
    if method == "pg":
        return replace(config, popgrad=PopulationGradSpec(int(v1), float(v2)))
    if method == "lr_decay":
        return replace(config, lr_decay=LRDecayConfig(int(v1), float(v2)))
    if method == "dropout":
        return replace(config, dropout=DropoutConfig(float(v1), float(v2)))
    if method == "l1":
        return replace(config, l1=L1Config(float(v1), float(v2)))
    if method == "l2":
        return replace(config, l2=L2Config(float(v1), float(v2)))
    if method in OPTIMIZERS:
        opt = replace(config.optimizer, kind=method).with_meta(float(v1), float(v2))
        return replace(config, optimizer=opt)
    raise ConfigError(f"unknown method {method!r}")


def _meta_label(v):
    return f"{v:g}" if isinstance(v, float) else str(v)


def method_jobs(method, grid, base_config, prefix=""):
    jobs, metas = [], []
    for v1, v2 in itertools.product(grid[0], grid[1]):
        cfg = apply_method(base_config, method, v1, v2)
        jobs.append((cfg, f"{prefix}{method}-{_meta_label(v1)}-{_meta_label(v2)}"))
        metas.append((v1, v2))
    return jobs, metas


@dataclass
class Comparison:
    baseline: RunRecord
    rows: list = field(default_factory=list)
    records: dict = field(default_factory=dict)  # method -> [RunRecord]

    def best(self, method):
        rows = [r for r in self.rows if r["method"] == method]
        i = _best([self.records[method][k] for k in range(len(rows))])
        return None if i is None else rows[i]

    def write_csv(self, path):
        write_rows(path, self.rows, CSV_COLUMNS)


def _row(method, v1, v2, rec, baseline):
    improvement = None
    if rec.mean_f1 is not None and baseline.mean_f1 is not None:
        improvement = rec.mean_f1 - baseline.mean_f1
    return {"method": method, "meta1": v1, "meta2": v2, "mean_f1": rec.mean_f1,
            "sd_f1": rec.sd_f1, "improvement": improvement, "run_id": rec.run_id}


def compare_methods(method_list, meta_grids=None, base_config=None, workers=1,
                    data_root=None, baseline=None):
    """Run every meta-parameter combination of each method against one baseline.

    The baseline is ``base_config`` with no method block, same seed.
    """
    grids = dict(DEFAULT_META_GRIDS)
    if meta_grids:
        grids.update(meta_grids)
    if baseline is None:
        baseline = run_many([(base_config, "baseline")], 1, data_root)[0]
    out = Comparison(baseline)
    for method in method_list:
        if method not in grids:
            raise ConfigError(f"no meta-parameter grid for method {method!r}")
        jobs, metas = method_jobs(method, grids[method], base_config)
        records = run_many(jobs, workers, data_root)
        out.records[method] = records
        for (v1, v2), rec in zip(metas, records):
            out.rows.append(_row(method, v1, v2, rec, baseline))
    return out


def combine_with_pg(method, method_grid, pg_spec_fixed, base_config, workers=1,
                    data_root=None, baseline=None):
    """Re-tune ``method`` with population gradients fixed at ``pg_spec_fixed``.

    ``method`` None (or ``"none"``) gives a single PG-only run.
    """
    pg_base = replace(base_config, popgrad=pg_spec_fixed)
    if baseline is None:
        baseline = run_many([(base_config, "baseline")], 1, data_root)[0]
    out = Comparison(baseline)
    if method in (None, "none"):
        records = run_many([(pg_base, "pg-only")], 1, data_root)
        out.records["pg"] = records
        out.rows.append(_row("pg", pg_spec_fixed.population_size,
                             pg_spec_fixed.population_range, records[0], baseline))
        return out
    grid = method_grid if method_grid is not None else DEFAULT_META_GRIDS[method]
    jobs, metas = method_jobs(method, grid, pg_base, prefix="pg+")
    records = run_many(jobs, workers, data_root)
    out.records[f"pg+{method}"] = records
    for (v1, v2), rec in zip(metas, records):
        out.rows.append(_row(f"pg+{method}", v1, v2, rec, baseline))
    return out


# ---------------------------------------------------------------------------
# long training and width sweeps


@dataclass
class LongTraining:
    baseline: RunRecord
    pg: RunRecord
    window: int

    def bins(self):
        rows = []
        for name, rec in (("baseline", self.baseline), ("pg", self.pg)):
            for (lo, hi), m, s in bin_f1(rec, self.window) if rec.entries else []:
                rows.append({"method": name, "first_epoch": lo, "last_epoch": hi,
                             "mean_f1": m, "sd_f1": s, "run_id": rec.run_id})
        return rows


def long_training(base_config, pg_spec, window=20, workers=1, data_root=None):
    jobs = [(base_config, "long-baseline"), (replace(base_config, popgrad=pg_spec), "long-pg")]
    baseline, pg = run_many(jobs, workers, data_root)
    return LongTraining(baseline, pg, window)


def width_sweep(multipliers=WIDTH_MULTIPLIERS, pg_grid=None, base_config=None, workers=1,
                data_root=None):
    """Baseline plus every PG grid cell at each width multiplier.

    Returns one dict per multiplier with keys ``multiplier``, ``n_params``,
    ``baseline`` and ``pg`` (list of ``(s, r, RunRecord)``).
    """
    pg_grid = pg_grid or WIDTH_PG_GRID
    sizes, ranges = pg_grid["population_size"], pg_grid["population_range"]
    jobs, index = [], []
    for m in multipliers:
        cfg = with_updates(base_config, model__width_multiplier=float(m))
        jobs.append((cfg, f"width{m:g}-baseline"))
        index.append((m, None, None))
        for s, r in itertools.product(sizes, ranges):
            jobs.append((replace(cfg, popgrad=PopulationGradSpec(int(s), float(r))),
                         f"width{m:g}-pg-{s}-{_meta_label(float(r))}"))
            index.append((m, s, r))
    records = run_many(jobs, workers, data_root)
    out = []
    for (m, s, r), rec in zip(index, records):
        if s is None:
            out.append({"multiplier": m, "n_params": rec.n_params, "baseline": rec, "pg": []})
        else:
            out[-1]["pg"].append((s, r, rec))
    return out


def width_rows(sweep):
    rows = []
    for entry in sweep:
        base = entry["baseline"]
        rows.append({"multiplier": entry["multiplier"], "method": "baseline",
                     "population_size": "", "population_range": "",
                     "n_params": entry["n_params"], "mean_f1": base.mean_f1,
                     "sd_f1": base.sd_f1, "improvement": 0.0 if base.mean_f1 is not None else None,
                     "run_id": base.run_id})
        for s, r, rec in entry["pg"]:
            imp = None
            if rec.mean_f1 is not None and base.mean_f1 is not None:
                imp = rec.mean_f1 - base.mean_f1
            rows.append({"multiplier": entry["multiplier"], "method": "pg",
                         "population_size": s, "population_range": r,
                         "n_params": rec.n_params, "mean_f1": rec.mean_f1, "sd_f1": rec.sd_f1,
                         "improvement": imp, "run_id": rec.run_id})
    return rows


@dataclass
class PairedSeeds:
    """Baseline and PG runs sharing each seed, for per-seed comparisons."""

    seeds: list
    baseline: list
    pg: list

    def improvements(self):
        return [None if b.mean_f1 is None or p.mean_f1 is None else p.mean_f1 - b.mean_f1
                for b, p in zip(self.baseline, self.pg)]

    def rows(self):
        return [{"seed": s, "baseline_f1": b.mean_f1, "pg_f1": p.mean_f1, "improvement": d}
                for s, b, p, d in zip(self.seeds, self.baseline, self.pg, self.improvements())]


def paired_seeds(base_config, pg_spec, seeds, workers=1, data_root=None):
    jobs = []
    for s in seeds:
        cfg = replace(base_config, seed=int(s), popgrad=None)
        jobs += [(cfg, f"seed{s}-baseline"), (replace(cfg, popgrad=pg_spec), f"seed{s}-pg")]
    records = run_many(jobs, workers, data_root)
    return PairedSeeds(list(seeds), records[0::2], records[1::2])


# ---------------------------------------------------------------------------


def write_rows(path, rows, columns=None):
    """CSV with ``columns`` (default: keys of the first row); None becomes empty."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})
    return path
