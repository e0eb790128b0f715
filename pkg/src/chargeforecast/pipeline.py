"""Glue between data, pre-training, fine-tuning and evaluation.

Every random stream is derived from one seed so that a run is reproducible
from its configuration alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .data import (FeaturePanel, NormalizationStats, WindowSet, ZoneGraph, build_windows,
                   chronological_split)
from .embedding import EdgeIndex, as_edge_index
from .model import ModelConfig, Params, init_params, loss_and_grad
from .pretraining import MetaConfig, build_buffers, fomaml_pretrain
from .training import FitResult, MetricReport, TrainConfig, evaluate, fit

log = logging.getLogger(__name__)

# stream labels for np.random.default_rng([seed, stream])
INIT_STREAM, BUFFER_STREAM, META_STREAM = 0, 1, 2


def stream(seed: int, label: int) -> np.random.Generator:
    return np.random.default_rng([seed, label])


@dataclass
class Prepared:
    """One dataset split and windowed for a single horizon."""

    graph: ZoneGraph
    edges: EdgeIndex
    train: FeaturePanel
    val: FeaturePanel
    test: FeaturePanel
    stats: NormalizationStats
    window: int
    horizon: int
    train_windows: WindowSet
    val_windows: WindowSet
    test_windows: WindowSet


def prepare(graph: ZoneGraph, panel: FeaturePanel, window: int, horizon: int,
            ratios=(6, 2, 2)) -> Prepared:
    train, val, test = chronological_split(panel, ratios, min_length=window + horizon)
    stats = NormalizationStats.fit(train)
    win = lambda seg: stats.normalize_windows(build_windows(seg, window, horizon))
    return Prepared(graph, as_edge_index(graph), train, val, test, stats, window, horizon,
                    win(train), win(val), win(test))


def initial_params(model_config: ModelConfig, seed: int) -> Params:
    return init_params(model_config, stream(seed, INIT_STREAM))


def pretrain(prepared: Prepared, model_config: ModelConfig, params: Params, meta: MetaConfig,
             laws, seed: int, progress: bool = False) -> tuple[Params, list[float]]:
    buffers = build_buffers(prepared.train, prepared.graph, laws, prepared.window, prepared.horizon,
                            stream(seed, BUFFER_STREAM), prepared.stats, meta.max_samples,
                            meta.zones_per_sample)

    def grad_fn(p, x, y):
        return loss_and_grad(p, x, y, prepared.edges, model_config)

    return fomaml_pretrain(params, buffers, meta, grad_fn, stream(seed, META_STREAM), progress)


def finetune(prepared: Prepared, model_config: ModelConfig, params: Params, config: TrainConfig,
             progress: bool = False, callback=None) -> FitResult:
    return fit(params, model_config, prepared.edges, prepared.train_windows, prepared.val_windows,
               config, progress, callback)


@dataclass
class VariantRun:
    variant: str
    params: Params
    fit: FitResult
    report: MetricReport


VARIANTS = ("full", "no_pretrain", "no_gat", "no_tpa")


def run_variant(prepared: Prepared, variant: str, base_config: ModelConfig, train: TrainConfig,
                meta: MetaConfig, laws, progress: bool = False) -> VariantRun:
    """Pre-train (unless ``no_pretrain``), fine-tune and evaluate one model variant.

    All variants start from the same initial draw for a given seed, so runs
    differ only in the module that was removed.
    """
    model_config = base_config.variant(variant)
    seed = train.seed
    params = initial_params(model_config, seed)
    if variant != "no_pretrain":
        params, _ = pretrain(prepared, model_config, params, meta, laws, seed, progress)
    result = finetune(prepared, model_config, params, replace(train, horizon=prepared.horizon),
                      progress)
    report = evaluate(result.params, model_config, prepared.edges, prepared.test_windows,
                      prepared.stats)
    return VariantRun(variant, result.params, result, report)
