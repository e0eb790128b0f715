"""Supervised fitting, Adam, early stopping and forecast metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import NormalizationStats, WindowSet
from .embedding import as_edge_index
from .model import ModelConfig, Params, loss_and_grad, predict_array

log = logging.getLogger(__name__)

MAPE_FLOOR = 1e-3


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    max_epochs: int = 1000
    patience: int = 100
    lr: float = 0.001
    weight_decay: float = 0.00001
    seed: int = 2023
    horizon: int = 3
    window: int = 12


def mse_loss(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Params, grads: Params, state: AdamState, lr: float,
              weight_decay: float = 0.0) -> Params:
    """One bias-corrected Adam update; weight decay is added to the gradient (L2)."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    updated = {}
    for k, p in params.items():
        g = grads[k] + weight_decay * p
        m = b1 * state.m.get(k, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        updated[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return updated


@dataclass
class FitResult:
    params: Params
    history: list[tuple[int, float, float]]
    best_epoch: int
    best_val_loss: float

    def write_history(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for epoch, tr, va in self.history:
                w.writerow([epoch, repr(tr), repr(va)])


def validation_loss(params, model_config, graph, windows: WindowSet) -> float:
    pred = predict_array(params, windows.x, graph, model_config)
    return mse_loss(pred, windows.y)


def fit(params: Params, model_config: ModelConfig, graph, train: WindowSet, val: WindowSet,
        config: TrainConfig, progress: bool = False, callback=None) -> FitResult:
    """Mini-batch Adam with per-epoch validation and best-snapshot restore.

    Training stops once ``patience`` consecutive epochs (at least one) pass
    without a new best validation loss, or at ``max_epochs``. ``callback``,
    when given, is called as callback(epoch, params) after every epoch.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training and validation windows must be non-empty")
    graph = as_edge_index(graph)
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    params = {k: v.copy() for k, v in params.items()}
    best = (math.inf, 0, params)
    since = 0
    history = []
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train))
        total = 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo:lo + config.batch_size]
            loss, grads = loss_and_grad(params, train.x[batch], train.y[batch], graph, model_config)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}")
            params = adam_step(params, grads, state, config.lr, config.weight_decay)
            total += loss * len(batch)
        train_loss = total / len(order)
        val_loss = validation_loss(params, model_config, graph, val)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"validation loss became {val_loss} at epoch {epoch}")
        history.append((epoch, train_loss, val_loss))
        if progress:
            log.info("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        if callback is not None:
            callback(epoch, params)
        if val_loss < best[0]:
            best = (val_loss, epoch, params)
            since = 0
        else:
            since += 1
            if since >= max(config.patience, 1):
                break
    return FitResult(best[2], history, best[1], best[0])


# ---------------------------------------------------------------- metrics

@dataclass(frozen=True)
class MetricReport:
    horizon: int
    rmse: float
    mape: float
    rae: float
    mae: float

    def row(self) -> list:
        return [self.horizon, repr(self.rmse), repr(self.mape), repr(self.rae), repr(self.mae)]


METRIC_HEADER = ["horizon", "rmse", "mape", "rae", "mae"]


def forecast_metrics(pred, target, horizon: int = 0) -> MetricReport:
    """Per-node RMSE, MAPE, RAE and MAE averaged over nodes.

    ``pred`` and ``target`` are (samples, nodes) or 1-D (one node).
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.ndim == 1:
        pred, target = pred[:, None], target[:, None]
    if len(pred) == 0:
        raise ValueError("no samples to evaluate")
    err = pred - target
    spread = np.abs(target - target.mean(axis=0)).sum(axis=0)
    if np.any(spread == 0):
        raise ValueError("constant target series: relative absolute error undefined")
    rmse = np.sqrt(np.mean(err ** 2, axis=0))
    mae = np.mean(np.abs(err), axis=0)
    mape = np.mean(np.abs(err) / np.maximum(np.abs(target), MAPE_FLOOR), axis=0)
    rae = np.abs(err).sum(axis=0) / spread
    return MetricReport(horizon, float(rmse.mean()), float(mape.mean()), float(rae.mean()),
                        float(mae.mean()))


def evaluate(params: Params, model_config: ModelConfig, graph, test: WindowSet,
             stats: NormalizationStats) -> MetricReport:
    """Metrics on the occupancy scale for normalized test windows."""
    if len(test) == 0:
        raise ValueError("test windows must be non-empty")
    pred = stats.denormalize(predict_array(params, test.x, graph, model_config))
    target = stats.denormalize(test.y)
    return forecast_metrics(pred, target, test.horizon)


def write_metrics(path, reports) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_HEADER)
        for r in reports:
            w.writerow(r.row())
