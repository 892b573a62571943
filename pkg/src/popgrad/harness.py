"""Training loop, metrics and run records.

Every random choice inside a run comes from a generator seeded with a tuple
``(seed, purpose, ...)``, so a run is a pure function of its config:

=========  ==============================
purpose    stream
=========  ==============================
0          parameter initialization
1, epoch   mini-batch partition
2, step    augmentation
3, step    dropout masks
4          population-gradient noise base
=========  ==============================
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .config import TrainConfig, config_to_dict
from .errors import ConfigError, NumericDivergenceError, UsageError
from .models import ModelSpec, build
from .optim import apply_update, init_state, lr_schedule
from .population import population_loss_and_grad
from .regsched import configure_dropout, configure_penalty

log = logging.getLogger(__name__)

INIT, PARTITION, AUGMENT, DROPOUT, NOISE = range(5)


# ---------------------------------------------------------------------------
# metrics


def f1_macro(predictions, labels, class_count):
    """Unweighted mean of per-class F1; a class with P + R = 0 scores 0."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise UsageError("predictions and labels differ in length")
    if labels.size == 0:
        raise UsageError("f1_macro needs at least one sample")
    cm = np.bincount(labels * class_count + predictions,
                     minlength=class_count * class_count).reshape(class_count, class_count)
    tp = np.diag(cm).astype(np.float64)
    pred_count = cm.sum(axis=0)
    true_count = cm.sum(axis=1)
    precision = np.divide(tp, pred_count, out=np.zeros(class_count), where=pred_count > 0)
    recall = np.divide(tp, true_count, out=np.zeros(class_count), where=true_count > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(class_count), where=denom > 0)
    return float(f1.mean())


def mean_sd(values):
    """Arithmetic mean and sample (n-1) SD; SD is 0 for a single value."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise UsageError("no values")
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd


def _f1_series(record):
    if isinstance(record, RunRecord):
        return [e["test_f1"] for e in record.entries]
    return list(record)


def summarize_last10(record):
    """Mean and sample SD of the final 10 test-F1 values."""
    series = _f1_series(record)
    if len(series) < 10:
        raise UsageError(f"summary needs >= 10 epochs, have {len(series)}")
    return mean_sd(series[-10:])


def bin_f1(record, window):
    """Test F1 averaged over disjoint windows ``[0, w), [w, 2w), ...``.

    Returns ``[((first_epoch, last_epoch), mean, sd), ...]``; a trailing
    partial window is kept with its actual length.
    """
    if window < 1:
        raise UsageError("window must be >= 1")
    series = _f1_series(record)
    out = []
    for start in range(0, len(series), window):
        chunk = series[start:start + window]
        m, s = mean_sd(chunk)
        out.append(((start, start + len(chunk) - 1), m, s))
    return out


# ---------------------------------------------------------------------------
# records


def config_digest(cfg_dict):
    blob = json.dumps(cfg_dict, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(blob).hexdigest()[:10]


@dataclass
class RunRecord:
    run_id: str
    config: dict
    entries: list = field(default_factory=list)
    summary: dict | None = None
    failure: dict | None = None
    n_params: int = 0

    @property
    def failed(self):
        return self.failure is not None

    @property
    def mean_f1(self):
        return None if self.summary is None else self.summary["mean_f1"]

    @property
    def sd_f1(self):
        return None if self.summary is None else self.summary["sd_f1"]

    def metric_stream(self):
        """Entries without wall-clock fields, for determinism comparisons."""
        return [{k: v for k, v in e.items() if k != "ms"} for e in self.entries]

    def summary_dict(self):
        return {
            "run_id": self.run_id,
            "config": self.config,
            "n_params": self.n_params,
            "epochs_completed": len(self.entries),
            "summary": self.summary,
            "failure": self.failure,
        }

    def write(self, out_dir):
        """Write ``<run_id>.jsonl`` and ``<run_id>.summary.json`` under ``out_dir``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jsonl = out_dir / f"{self.run_id}.jsonl"
        with open(jsonl, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps({"run_id": self.run_id, **e}) + "\n")
        summary = out_dir / f"{self.run_id}.summary.json"
        summary.write_text(json.dumps(self.summary_dict(), indent=2, sort_keys=True) + "\n")
        return jsonl, summary


# ---------------------------------------------------------------------------
# data and model setup


@functools.lru_cache(maxsize=8)
def _load_split(name, root, split):
    if name == "fashion_mnist":
        return D.load_fashion_mnist(root, split)
    if name == "cifar10":
        return D.load_cifar10(root, split)
    raise ConfigError(f"unknown dataset {name!r}")


def load_datasets(dcfg, root=None):
    """Train and test :class:`Dataset` for a :class:`DatasetConfig`."""
    if dcfg.name == "synth":
        train = D.synth_blobs(dcfg.classes, dcfg.per_class, dcfg.dim, dcfg.spread,
                              dcfg.synth_seed, split="train")
        test = D.synth_blobs(dcfg.classes, dcfg.test_per_class, dcfg.dim, dcfg.spread,
                             dcfg.synth_seed, split="test")
    else:
        root = str(D.data_root(root))
        train = _load_split(dcfg.name, root, "train")
        test = _load_split(dcfg.name, root, "test")
    train = D.seeded_subset(train, dcfg.train_subset, [dcfg.subset_seed, 0])
    test = D.seeded_subset(test, dcfg.test_subset, [dcfg.subset_seed, 1])
    return train, test


def model_spec_for(mcfg, input_shape, classes):
    input_shape = tuple(int(v) for v in input_shape)
    if mcfg.kind in ("mlp", "linear"):
        hidden = tuple(mcfg.hidden) if mcfg.kind == "mlp" else ()
        sizes = (int(np.prod(input_shape)),) + hidden + (classes,)
        return ModelSpec("mlp", input_shape, classes, layer_sizes=sizes,
                         width_multiplier=mcfg.width_multiplier)
    return ModelSpec("miniconv", input_shape, classes, channels=tuple(mcfg.channels),
                     head=mcfg.head, width_multiplier=mcfg.width_multiplier)


def build_model(config, input_shape, classes):
    """Model with the config's dropout and penalty blocks applied, plus init params."""
    spec = model_spec_for(config.model, input_shape, classes)
    model, params = build(spec, np.random.default_rng([config.seed, INIT]))
    if config.dropout is not None:
        model = configure_dropout(model, config.dropout.dropout_first, config.dropout.dropout_last)
    if config.l1 is not None:
        model = configure_penalty(model, "l1", config.l1.l1_first, config.l1.l1_last)
    if config.l2 is not None:
        model = configure_penalty(model, "l2", config.l2.l2_first, config.l2.l2_last)
    return model, params


def prepare(config, data=None, data_root=None):
    """Normalized train/test arrays and a freshly built model for ``config``."""
    train, test = data if data is not None else load_datasets(config.dataset, data_root)
    config.augment.check_image_shape(train.shape)
    aug = config.augment
    x_train, stats = D.normalize(train.images, aug.norm_mean, aug.norm_sd)
    x_test, _ = D.normalize(test.images, aug.norm_mean, aug.norm_sd, stats=stats)
    model, params = build_model(config, train.shape, train.class_count)
    return model, params, (x_train, train.labels), (x_test, test.labels), train.class_count


def noise_seed(seed):
    return int(np.random.SeedSequence([seed, NOISE]).generate_state(1)[0])


@np.errstate(over="ignore", invalid="ignore")  # divergence is detected explicitly
def run_training(config: TrainConfig, *, data=None, data_root=None, workers=1,
                 hooks=None, label="run", return_params=False):
    """Train ``config`` for ``config.epochs`` epochs and record test macro-F1.

    ``hooks`` may hold ``on_gradient(epoch, batch, grad)`` and
    ``on_update(epoch, batch, params)`` callables. Numeric divergence stops
    the run and is stored in ``record.failure``; it is not raised.
    """
    hooks = hooks or {}
    cfg_dict = config_to_dict(config)
    run_id = f"{label}-{config_digest(cfg_dict)}"
    model, params, (x_train, y_train), (x_test, y_test), classes = prepare(config, data, data_root)
    record = RunRecord(run_id, cfg_dict, n_params=model.n_params)
    opt = config.optimizer
    state = init_state(model.n_params)
    pg_seed = noise_seed(config.seed)
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        if config.lr_decay is not None:
            lr = lr_schedule(epoch, config.epochs, config.lr_decay.n_eras,
                             config.lr_decay.era_decay, opt.lr)
        else:
            lr = opt.lr
        batches = D.minibatches(len(y_train), config.batch_size, [config.seed, PARTITION, epoch])
        loss_sum = 0.0
        try:
            for b, idx in enumerate(batches):
                xb = D.augment_batch(x_train[idx], config.augment,
                                     np.random.default_rng([config.seed, AUGMENT, step]))
                yb = y_train[idx]
                dropout_key = [config.seed, DROPOUT, step]
                try:
                    if config.popgrad is not None:
                        loss, grad = population_loss_and_grad(
                            model, params, (xb, yb), config.popgrad, pg_seed, step,
                            dropout_key=dropout_key, workers=workers)
                    else:
                        loss, grad = model.loss_and_grad(
                            params, xb, yb, rng=np.random.default_rng(dropout_key))
                    if "on_gradient" in hooks:
                        hooks["on_gradient"](epoch, b, grad)
                    params, state = apply_update(state, params, grad, opt, lr)
                except NumericDivergenceError as exc:
                    exc.epoch, exc.batch = epoch, b
                    raise
                if "on_update" in hooks:
                    hooks["on_update"](epoch, b, params)
                loss_sum += loss * len(idx)
                step += 1
        except NumericDivergenceError as exc:
            log.warning("run %s diverged at epoch %d batch %s", run_id, epoch, exc.batch)
            record.failure = exc.to_dict()
            break
        pred = model.predict(params, x_test)
        record.entries.append({
            "epoch": epoch,
            "train_loss": loss_sum / len(y_train),
            "test_f1": f1_macro(pred, y_test, classes),
            "ms": round((time.perf_counter() - t0) * 1000.0, 3),
        })
    if len(record.entries) >= 10:
        m, s = summarize_last10(record)
        record.summary = {"mean_f1": m, "sd_f1": s}
    if return_params:
        return record, model, params
    return record


def final_f1(record):
    return record.entries[-1]["test_f1"] if record.entries else math.nan
