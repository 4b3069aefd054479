"""Mini-batch training with MAE loss and Adam, keeping the best-validation weights."""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import DatasetBundle, FeatureScaler, SequenceSample, stack_samples, train_digest
from .errors import ConfigMismatch, EmptyDataset, InvalidConfig
from .models import Model, ModelCheckpoint, Provenance, save_checkpoint
from .nncore import Rng, adam_step, clip_grad_norm, mae_loss

HISTORY_COLUMNS = ("epoch", "train_mae_scaled", "val_mae_raw", "ms")
SUGGESTED_MAX_GRAD_NORM = 5.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle_seed: int = 0
    val_fraction: float = 0.1
    checkpoint_path: str | None = None
    history_path: str | None = None
    # selects on bundle.test, like the original protocol; leaks the test set
    mimic_paper_checkpointing: bool = False
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise InvalidConfig("val_fraction must be in [0, 1)")
        if self.lr < 0:
            raise InvalidConfig("lr must be >= 0")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_mae: float
    val_mae: float
    ms: float


def validate(model: Model, samples: Sequence[SequenceSample], scaler: FeatureScaler) -> float:
    """Eval-mode MAE of the rating component, in raw rating units."""
    if not samples:
        raise EmptyDataset("validation needs at least one sample")
    x, y = stack_samples(samples)
    pred = model.predict(x)
    pred_rating = scaler.inverse_column(pred[:, 0], 0)
    true_rating = scaler.inverse_column(y[:, 0], 0)
    # fsum keeps the result independent of sample order
    return math.fsum(np.abs(pred_rating - true_rating).tolist()) / len(samples)


def split_validation(samples: Sequence[SequenceSample], val_fraction: float):
    """Hold out the last ``round(val_fraction * n)`` samples (already shuffled by the split)."""
    n = len(samples)
    n_val = int(math.floor(val_fraction * n + 0.5))
    if n_val == 0 or n_val >= n:
        return list(samples), []
    return list(samples[: n - n_val]), list(samples[n - n_val :])


def _append_history(path: str, rec: EpochRecord) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(HISTORY_COLUMNS)
        w.writerow([rec.epoch, repr(rec.train_mae), repr(rec.val_mae), f"{rec.ms:.1f}"])


def train(model: Model, bundle: DatasetBundle, cfg: TrainConfig) -> tuple[ModelCheckpoint, list[EpochRecord]]:
    """Train ``model`` in place; return the best checkpoint and per-epoch history.

    Selection uses a validation slice carved from ``bundle.train``. With no
    validation slice (``val_fraction`` 0 or too few samples) the training
    samples themselves are scored. ``bundle.test`` is only touched when
    ``cfg.mimic_paper_checkpointing`` is set.
    """
    train_samples = bundle.train
    if not train_samples:
        raise EmptyDataset("bundle has no training samples")
    F = bundle.n_features
    mc = model.config
    if mc.input_features != F or mc.output_features != F:
        raise ConfigMismatch(f"model expects {mc.input_features} features, dataset has {F}")
    if train_samples[0].inputs.shape[0] != mc.seq_len:
        raise ConfigMismatch(f"model seq_len {mc.seq_len}, dataset {train_samples[0].inputs.shape[0]}")
    scaler = bundle.scaler

    if cfg.mimic_paper_checkpointing:
        fit, val, selection = list(train_samples), list(bundle.test), "test"
        if not val:
            raise EmptyDataset("mimic checkpointing needs a nonempty test set")
    else:
        fit, val = split_validation(train_samples, cfg.val_fraction)
        selection = "val"
        if not val:
            val, selection = fit, "train"

    x_all, y_all = stack_samples(fit)
    n = len(fit)
    params = model.params()
    for p in params:
        p.zero_grad()
    dropout_rng = Rng(cfg.shuffle_seed)
    if cfg.history_path and os.path.exists(cfg.history_path):
        os.remove(cfg.history_path)

    history: list[EpochRecord] = []
    best_val = math.inf
    best_flat = model.get_flat()
    best_epoch = 0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = Rng(cfg.shuffle_seed ^ epoch).permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            pred, tape = model.forward(x_all[idx], training=True, rng=dropout_rng)
            loss, grad = mae_loss(pred, y_all[idx])
            model.backward(tape, grad)
            if cfg.max_grad_norm is not None:
                clip_grad_norm(params, cfg.max_grad_norm)
            step += 1
            adam_step(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, step)
            loss_sum += loss * len(idx)
        val_mae = validate(model, val, scaler)
        rec = EpochRecord(epoch, loss_sum / n, val_mae, 1000.0 * (time.perf_counter() - t0))
        history.append(rec)
        if cfg.history_path:
            _append_history(cfg.history_path, rec)
        if val_mae < best_val:
            best_val, best_epoch = val_mae, epoch
            best_flat = model.get_flat()

    prov = Provenance(
        epochs_run=cfg.epochs,
        best_epoch=best_epoch,
        best_val_mae=best_val,
        shuffle_seed=cfg.shuffle_seed,
        split_seed=bundle.split_seed,
        adam_steps=step,
        selection=selection,
        dataset_hash=train_digest(bundle),
    )
    ckpt = ModelCheckpoint(config=model.config, scaler=scaler, params=best_flat, provenance=prov)
    if cfg.checkpoint_path:
        save_checkpoint(ckpt, cfg.checkpoint_path)
    return ckpt, history
