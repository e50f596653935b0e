"""Training loop with per-epoch validation and early stopping.

One unit is everything the model scores jointly: a (score, part) pair
for single-part models, a whole score for coupled models. Units are
encoded once up front, shuffled each epoch, and batched; the batch loss
is total bits divided by total events so gradient scale does not depend
on batch composition. Validation uses the headline metric (mean
bits-per-beat across scores); the best parameters are kept and restored
when `patience` epochs pass without improvement.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .coupled import CoupledModel
from .evaluate import cross_entropy_rate
from .score import Score


class NumericFailure(Exception):
    """Loss or gradients stopped being finite."""


@dataclass
class TrainConfig:
    spec: str = "lin,k=5"
    coupled: bool = False
    optimizer: str = "adam"        # adam | sgd
    lr: float = 1e-3
    clip: float | None = None
    batch_units: int = 4
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    checkpoint: str | None = None

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in (
            "spec", "coupled", "optimizer", "lr", "clip", "batch_units",
            "max_epochs", "patience", "seed", "checkpoint")}


@dataclass
class TrainResult:
    best_epoch: int
    best_val: float
    epochs_run: int
    history: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def _encode_units(model, scores: list[Score]) -> list[dict]:
    units = []
    if isinstance(model, CoupledModel):
        for s in scores:
            arrays = model.encode_score(s)
            arrays["n_events"] = len(arrays["y_t"])
            units.append(arrays)
        return units
    for s in scores:
        for p in range(s.n_parts):
            arrays = model.encode_unit(s, p)
            arrays["n_events"] = len(arrays["y_t"])
            units.append(arrays)
    return units


def _batch_loss(model, batch: list[dict]):
    total = None
    n_events = 0
    for arrays in batch:
        bits_t, bits_n = model.unit_loss(arrays)
        unit = ad.add(bits_t, bits_n)
        total = unit if total is None else ad.add(total, unit)
        n_events += arrays["n_events"]
    return ad.mul(total, 1.0 / n_events), n_events


def train(model, train_scores: list[Score], valid_scores: list[Score] | None,
          config: TrainConfig, log=None) -> TrainResult:
    """Fit the model in place; returns the stopping summary."""
    t_start = time.monotonic()
    units = _encode_units(model, train_scores)
    if not units:
        raise ValueError("no training units")
    params = [model.params[k] for k in sorted(model.params)]
    if config.optimizer == "adam":
        opt = ad.Adam(params, lr=config.lr, clip=config.clip)
    else:
        opt = ad.SGD(params, lr=config.lr, clip=config.clip)
    rng = np.random.default_rng(config.seed)

    best_val = float("inf")
    best_epoch = 0
    best_state: dict[str, np.ndarray] = {}
    history: list[dict] = []
    epochs_run = 0

    for epoch in range(1, config.max_epochs + 1):
        epochs_run = epoch
        order = rng.permutation(len(units))
        epoch_bits = 0.0
        epoch_events = 0
        for lo in range(0, len(order), config.batch_units):
            batch = [units[i] for i in order[lo:lo + config.batch_units]]
            loss, n_events = _batch_loss(model, batch)
            if not np.isfinite(loss.value):
                raise NumericFailure(f"non-finite loss at epoch {epoch}")
            ad.backward(loss)
            opt.step()
            epoch_bits += float(loss.value) * n_events
            epoch_events += n_events
        train_bits_per_event = epoch_bits / epoch_events

        if valid_scores:
            val = cross_entropy_rate(model, valid_scores).total_bits_per_beat
        else:
            val = train_bits_per_event
        if not np.isfinite(val):
            raise NumericFailure(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_bits_per_event": train_bits_per_event,
                        "val": val})
        if log:
            log(f"epoch {epoch:4d}  train {train_bits_per_event:8.4f} bits/event"
                f"  val {val:8.4f}")
        if val < best_val - 1e-12:
            best_val = val
            best_epoch = epoch
            best_state = {k: p.value.copy() for k, p in model.params.items()}
        elif epoch - best_epoch >= config.patience:
            break

    if best_state:
        for k, p in model.params.items():
            p.value = best_state[k]
    return TrainResult(best_epoch=best_epoch, best_val=best_val,
                       epochs_run=epochs_run, history=history,
                       seconds=time.monotonic() - t_start)
