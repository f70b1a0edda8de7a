"""Deterministic mini-batch training: Adam, geometric LR decay, MSE loss."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tape, Tensor
from .data import WindowedDataset
from .errors import ConfigError, DataError, DimensionError, NumericalError
from .models import Forecaster, load_checkpoint, load_parameters, save_checkpoint, snapshot

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "AdamState",
    "EpochRecord",
    "mse_loss",
    "adam_step",
    "train",
    "train_steps",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    decay: float = 1.0
    batch_size: int = 32
    epochs: int = 20
    seed: int = 2021
    patience: int = 5
    eval_each_epoch: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 < self.decay <= 1:
            raise ConfigError(f"decay must lie in (0, 1], got {self.decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during ``epoch`` (0-based)."""
        return self.lr * self.decay**epoch


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over every element (all channels, all steps)."""
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    return ad.mse(pred, target)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
    """One bias-corrected Adam update. Parameters with no gradient entry are
    treated as having a zero gradient."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        if g is None:
            m *= state.beta1
            v *= state.beta2
        else:
            if g.shape != p.shape:
                raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * (g * g)
        if not m.any():
            continue
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new = p.data - update
        new.setflags(write=False)
        p.data = new


def _loss_and_grads(model: Forecaster, batch, rng: Rng | None, training: bool):
    obs, tgt, obs_st, tgt_st = batch
    params = model.parameters()
    with Tape() as tape:
        pred = model(ad.constant(obs), obs_st, tgt_st, training=training, rng=rng)
        loss = mse_loss(pred, ad.constant(tgt))
    value = loss.item()
    if not math.isfinite(value):
        return value, {}
    raw = ad.backward(loss, tape)
    grads = {n: raw[p] for n, p in params.items() if p in raw}
    return value, grads


def predict(model: Forecaster, dataset: WindowedDataset, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode predictions and targets for every window, each (N, tau, C)."""
    preds, targets = [], []
    for lo in range(0, len(dataset), batch_size):
        obs, tgt, obs_st, tgt_st = dataset.batch(np.arange(lo, min(lo + batch_size, len(dataset))))
        preds.append(model(ad.constant(obs), obs_st, tgt_st, training=False).data)
        targets.append(tgt)
    return np.concatenate(preds), np.concatenate(targets)


def _check_match(model: Forecaster, ds: WindowedDataset):
    cfg = model.config
    if (ds.T, ds.tau, ds.channels) != (cfg.T, cfg.tau, cfg.C):
        raise DataError(
            f"dataset windows (T={ds.T}, tau={ds.tau}, C={ds.channels}) do not match model "
            f"(T={cfg.T}, tau={cfg.tau}, C={cfg.C})"
        )
    if cfg.temporal_active and ds.segment.stamps.shape[1] != len(cfg.datetime_components):
        raise DataError(
            f"dataset carries {ds.segment.stamps.shape[1]} stamp columns, model expects "
            f"{list(cfg.datetime_components)}"
        )


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_mse: float
    val_mse: float
    val_mae: float
    seconds: float

    def log_line(self) -> str:
        return (
            f"{self.epoch}, {self.lr:.17g}, {self.train_mse:.17g}, {self.val_mse:.17g}, "
            f"{self.val_mae:.17g}, {self.seconds:.3f}"
        )


@dataclass
class TrainResult:
    model: Forecaster
    history: list[EpochRecord]
    best_epoch: int | None
    stopped_early: bool = False

    def history_dicts(self) -> list[dict]:
        return [asdict(r) for r in self.history]


def train(
    model: Forecaster,
    train_set: WindowedDataset,
    cfg: TrainConfig,
    val_set: WindowedDataset | None = None,
    log_path=None,
) -> TrainResult:
    """Train in place and restore the parameters of the best validation epoch.

    Without a validation set the final parameters are kept. Every randomness
    source (shuffle order, dropout masks) derives from ``cfg.seed``.
    """
    _check_match(model, train_set)
    if val_set is not None:
        _check_match(model, val_set)
    params = model.parameters()
    state = AdamState()
    root = Rng(cfg.seed)
    history: list[EpochRecord] = []
    best = (math.inf, None, snapshot(model))
    bad_epochs = 0
    stopped = False
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            lr = cfg.lr_at(epoch)
            order = root.spawn(f"shuffle.{epoch}").permutation(len(train_set))
            drop_rng = root.spawn(f"dropout.{epoch}")
            total, count = 0.0, 0
            for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[lo : lo + cfg.batch_size]
                loss, grads = _loss_and_grads(model, train_set.batch(idx), drop_rng, training=True)
                if not math.isfinite(loss):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch}, batch {b}, lr {lr:.3g}", epoch, b, lr
                    )
                adam_step(state, params, grads, lr)
                total += loss * len(idx)
                count += len(idx)
            train_mse = total / max(count, 1)
            val_mse = val_mae = math.nan
            if val_set is not None and (cfg.eval_each_epoch or epoch == cfg.epochs - 1):
                pred, tgt = predict(model, val_set)
                val_mse = float(np.mean((pred - tgt) ** 2))
                val_mae = float(np.mean(np.abs(pred - tgt)))
            rec = EpochRecord(epoch, lr, train_mse, val_mse, val_mae, time.perf_counter() - t0)
            history.append(rec)
            if log_fh:
                log_fh.write(rec.log_line() + "\n")
                log_fh.flush()
            log.info("epoch %d lr %.3g train %.5f val %.5f", epoch, lr, train_mse, val_mse)
            if val_set is None or math.isnan(val_mse):
                continue
            if val_mse < best[0]:
                best = (val_mse, epoch, snapshot(model))
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.patience:
                    stopped = True
                    break
    finally:
        if log_fh:
            log_fh.close()
    if best[1] is not None:
        load_parameters(model, best[2])
    return TrainResult(model, history, best[1], stopped)


def train_steps(model: Forecaster, batch, steps: int, lr: float, seed: int = 2021) -> list[float]:
    """Repeat Adam updates on one fixed batch; returns the loss before each step."""
    params = model.parameters()
    state = AdamState()
    rng = Rng(seed)
    losses = []
    for step in range(steps):
        loss, grads = _loss_and_grads(model, batch, rng, training=True)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {step}", None, step, lr)
        losses.append(loss)
        adam_step(state, params, grads, lr)
    return losses


def write_run_log_header(path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch, lr, train_mse, val_mse, val_mae, seconds\n")
