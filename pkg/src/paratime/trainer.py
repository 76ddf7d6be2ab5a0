"""Training loop and evaluation protocol.

Training minimizes Huber loss with Adam on channel-independent windows of
the train split. Metrics are computed on the dataset standardized by
train-split statistics (the scale every published number on these
benchmarks uses); the model's own instance normalization operates on top of
that and is inverted before scoring, so predictions and targets compare on
the standardized scale. The checkpoint kept is the best-validation-MSE one.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import TimeSeriesDataset, WindowBatch, count_windows, standardize, window_iter
from .errors import ConfigError, NumericError, SplitError
from .model import ParallelTime
from .tensor import Tape, Tensor

__all__ = [
    "TrainConfig",
    "EvalReport",
    "TrainResult",
    "AdamState",
    "huber_loss",
    "adam_step",
    "clip_grad_norm",
    "train",
    "evaluate",
    "baseline_repeat_last",
    "baseline_seasonal_naive",
]

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    batch: int = 64
    huber_delta: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0  # divergence guard on the global gradient norm
    variate_subsample: int | None = None  # train batches draw this many variates
    val_subsample: int | None = None  # validation scores this many variates
    seed: int = 2023

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.huber_delta <= 0:
            raise ConfigError(f"huber_delta must be positive, got {self.huber_delta}")


@dataclass
class EvalReport:
    mse: float
    mae: float
    n_windows: int
    horizon: int
    dataset: str = ""
    split: str = ""


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mse: float = float("inf")
    best_val_mae: float = float("inf")


def huber_loss(pred: Tensor, target: Tensor, delta: float = 1.0) -> Tensor:
    """Mean over elements of the quadratic/linear robust loss.

    0.5*e^2 for |e| <= delta, else delta*(|e| - delta/2); the two branches
    agree in value and slope at |e| = delta.
    """
    if pred.shape != target.shape:
        raise ConfigError(f"huber_loss: shapes differ, {pred.shape} vs {target.shape}")
    err = T.sub(pred, target)
    abs_err = T.absolute(err)
    quad = T.mul(T.mul(err, err), Tensor(np.asarray(0.5, dtype=err.dtype)))
    lin = T.mul(T.sub(abs_err, Tensor(np.asarray(0.5 * delta, dtype=err.dtype))), Tensor(np.asarray(delta, dtype=err.dtype)))
    return T.tmean(T.where(abs_err.data <= delta, quad, lin))


class AdamState:
    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def clip_grad_norm(named_params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    grads = []
    for _, p in named_params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
            grads.append(p)
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in grads:
            p.grad = p.grad * scale
    return norm


def adam_step(
    named_params: list[tuple[str, Tensor]],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, in place. Missing gradients count as zero."""
    state.step += 1
    t = state.step
    for name, p in named_params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NumericError(f"adam_step: non-finite gradient for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m[:] = beta1 * m + (1.0 - beta1) * g
        v[:] = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


def _batch_metrics(model: ParallelTime, batch: WindowBatch) -> tuple[float, float, int]:
    pred = model.forward(batch.lookback).data
    err = pred.astype(np.float64) - batch.target.astype(np.float64)
    return float((err**2).sum()), float(np.abs(err).sum()), err.size


def evaluate(
    model: ParallelTime,
    ds: TimeSeriesDataset,
    splits,
    split: str = "test",
    batch: int = 256,
    variate_subset: np.ndarray | None = None,
) -> EvalReport:
    """Mean MSE/MAE over every admissible window of one split.

    The dataset is standardized from train statistics internally, so raw
    datasets can be passed directly. ``variate_subset`` restricts scoring to
    chosen variates (used for large-N validation); test evaluation should
    leave it unset so the split is used in its entirety.
    """
    names = ("train", "val", "test")
    if split not in names:
        raise ConfigError(f"split must be one of {names}, got {split!r}")
    rng_range = splits[names.index(split)]
    std_ds, _, _ = standardize(ds, train_end=splits[0][1])
    if variate_subset is not None:
        std_ds = TimeSeriesDataset(
            values=std_ds.values[variate_subset],
            variate_names=[std_ds.variate_names[i] for i in variate_subset],
            name=std_ds.name,
        )
    cfg = model.cfg
    if count_windows(rng_range, cfg.lookback, cfg.horizon) < 1:
        raise SplitError(f"{ds.name}: {split} split admits no window")
    sse = sae = 0.0
    n_el = 0
    n_windows = 0
    for wb in window_iter(std_ds, rng_range, cfg.lookback, cfg.horizon, batch=batch):
        bs, ba, bn = _batch_metrics(model, wb)
        sse += bs
        sae += ba
        n_el += bn
        n_windows += wb.lookback.shape[0]
    return EvalReport(
        mse=sse / n_el,
        mae=sae / n_el,
        n_windows=n_windows,
        horizon=cfg.horizon,
        dataset=ds.name,
        split=split,
    )


def train(
    model: ParallelTime,
    ds: TimeSeriesDataset,
    splits,
    cfg: TrainConfig,
    history_path=None,
) -> TrainResult:
    """Fit the model on the train range, tracking validation after each epoch.

    Deterministic for a fixed ``cfg.seed`` (shuffling, subsampling and
    dropout all derive from it). The best-validation parameters are restored
    into the model before returning. ``history_path``, when given, receives
    one JSON record per line per epoch.
    """
    mcfg = model.cfg
    train_rng, val_rng_range = splits[0], splits[1]
    std_ds, _, _ = standardize(ds, train_end=train_rng[1])
    gen = np.random.default_rng(cfg.seed)
    named = list(model.named_parameters())
    adam = AdamState()
    result = TrainResult()
    best_params: dict[str, np.ndarray] | None = None
    t_start = time.time()
    history_fh = open(history_path, "w") if history_path is not None else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            dropout_rng = np.random.default_rng(gen.integers(2**63))
            epoch_losses = []
            batches = window_iter(
                std_ds,
                train_rng,
                mcfg.lookback,
                mcfg.horizon,
                batch=cfg.batch,
                variate_subsample=cfg.variate_subsample,
                seed=int(gen.integers(2**63)),
                shuffle=True,
            )
            for step, wb in enumerate(batches):
                for _, p in named:
                    p.zero_grad()
                with Tape() as tape:
                    pred = model.forward(wb.lookback, training=True, rng=dropout_rng)
                    loss = huber_loss(pred, Tensor(wb.target.astype(mcfg.np_dtype)), delta=cfg.huber_delta)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise NumericError(f"training diverged: non-finite loss at epoch {epoch}, step {step}")
                tape.backward(loss)
                clip_grad_norm(named, cfg.clip_norm)
                adam_step(named, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
                epoch_losses.append(loss_val)

            subset = None
            if cfg.val_subsample is not None:
                if cfg.val_subsample > ds.n_variates:
                    raise ConfigError(f"val_subsample={cfg.val_subsample} exceeds {ds.n_variates} variates")
                subset = np.sort(gen.choice(ds.n_variates, size=cfg.val_subsample, replace=False))
            val = evaluate(model, ds, splits, split="val", batch=cfg.batch, variate_subset=subset)
            record = {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "val_mse": val.mse,
                "val_mae": val.mae,
                "wall_time": time.time() - t_start,
            }
            result.history.append(record)
            if history_fh is not None:
                history_fh.write(json.dumps(record) + "\n")
                history_fh.flush()
            log.info(
                "epoch %d/%d: train_loss=%.5f val_mse=%.5f val_mae=%.5f",
                epoch,
                cfg.epochs,
                record["train_loss"],
                val.mse,
                val.mae,
            )
            if val.mse < result.best_val_mse:
                result.best_epoch = epoch
                result.best_val_mse = val.mse
                result.best_val_mae = val.mae
                best_params = {name: p.data.copy() for name, p in named}
    finally:
        if history_fh is not None:
            history_fh.close()
    if best_params is not None:
        for name, p in named:
            p.data[:] = best_params[name]
    return result


def baseline_repeat_last(lookback: np.ndarray, horizon: int) -> np.ndarray:
    """Predict the last observed value for every step of the horizon."""
    return np.repeat(lookback[..., -1:], horizon, axis=-1)


def baseline_seasonal_naive(lookback: np.ndarray, horizon: int, period: int) -> np.ndarray:
    """Copy the last full season forward, tiling as needed."""
    if period < 1 or period > lookback.shape[-1]:
        raise ConfigError(f"period={period} invalid for lookback length {lookback.shape[-1]}")
    season = lookback[..., -period:]
    reps = -(-horizon // period)
    tiled = np.concatenate([season] * reps, axis=-1)
    return tiled[..., :horizon]
