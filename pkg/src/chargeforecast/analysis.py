"""Counterfactual price probing and the ablation table.

A probe copies a set of raw input windows, moves one zone's price over the
whole input slice, and compares the model's denormalized forecasts with
those for the untouched windows. Nothing in the stored windows is modified.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import PRICE, FeaturePanel, NormalizationStats, WindowSet, ZoneGraph
from .embedding import as_edge_index
from .model import ModelConfig, Params, predict_array
from .pipeline import VARIANTS, prepare, run_variant

PERCENT_MAGNITUDES = (-0.3, -0.2, -0.1, 0.1, 0.2, 0.3)
STD_MAGNITUDES = (-1.0, 1.0)
MAX_HOP = 2


@dataclass(frozen=True)
class ImpulseSpec:
    """``percentile``: price scaled by (1 + m). ``std``: price shifted by m training-split stds."""

    kind: str = "percentile"
    magnitudes: tuple = PERCENT_MAGNITUDES
    zones: object = "all"          # "all", "dynamic" or an explicit list of zone ids
    max_windows: int | None = 256  # probe windows, evenly spaced; None uses all

    def __post_init__(self):
        if self.kind not in ("percentile", "std"):
            raise ValueError(f"unknown impulse kind {self.kind!r}")
        if self.kind == "percentile" and any(m == 0 for m in self.magnitudes):
            raise ValueError("percentile magnitudes must be nonzero")
        if not self.magnitudes:
            raise ValueError("at least one magnitude is required")


@dataclass(frozen=True)
class ResponseRecord:
    zone: int
    magnitude: float
    local: float                 # mean forecast change at the impulsed zone
    hops: dict                   # hop -> mean change over zones at that distance (absent if none)
    relative: float              # local change relative to the base forecast
    price_change: float          # mean relative price change dp / p of the impulse
    hop_relative: dict

    @property
    def elasticity(self) -> float:
        """Relative response per unit relative price change."""
        return self.relative / self.price_change if self.price_change else 0.0

    def hop(self, h: int):
        return self.local if h == 0 else self.hops.get(h)


def price_std(panel: FeaturePanel) -> np.ndarray:
    """Per-zone price standard deviation (use the training split)."""
    return panel.price.std(axis=1)


def detect_dynamic_zones(panel: FeaturePanel, steps_per_day: int = 288) -> list[int]:
    """Zones whose price changes at least once within a day."""
    p = panel.price
    T = p.shape[1]
    within = np.ones(max(T - 1, 0), dtype=bool)
    within[steps_per_day - 1::steps_per_day] = False     # step from one day into the next
    changes = np.abs(np.diff(p, axis=1))[:, within] > 1e-12
    return [int(i) for i in np.flatnonzero(changes.any(axis=1))]


def resolve_zones(spec: ImpulseSpec, graph: ZoneGraph, dynamic=None) -> list[int]:
    if isinstance(spec.zones, str):
        if spec.zones == "all":
            return list(range(graph.num_nodes))
        if spec.zones == "dynamic":
            if dynamic is None:
                raise ValueError("dynamic zones requested but not supplied")
            return [int(z) for z in dynamic]
        raise ValueError(f"unknown zone selection {spec.zones!r}")
    zones = [int(z) for z in spec.zones]
    bad = [z for z in zones if not 0 <= z < graph.num_nodes]
    if bad:
        raise ValueError(f"zone {bad[0]} not in graph")
    return zones


def perturb(windows: WindowSet, zone: int, magnitude: float, kind: str,
            std: np.ndarray | None = None) -> np.ndarray:
    """Copy of the raw inputs with ``zone``'s price moved over every input step."""
    x = windows.x.copy()
    if kind == "percentile":
        x[:, zone, :, PRICE] *= 1.0 + magnitude
    else:
        x[:, zone, :, PRICE] += magnitude * std[zone]
    if np.any(x[:, zone, :, PRICE] <= 0):
        raise ValueError(f"impulse {magnitude} drives the price of zone {zone} non-positive")
    return x


def probe_windows(windows: WindowSet, max_windows: int | None) -> WindowSet:
    """Evenly spaced subset of at most ``max_windows`` windows."""
    if max_windows is None or len(windows) <= max_windows:
        return windows
    idx = np.unique(np.linspace(0, len(windows) - 1, max_windows).round().astype(int))
    return windows.subset(idx)


def _forecast(params, x_raw, stats, graph, config) -> np.ndarray:
    x = (x_raw - stats.mean[None, :, None, :]) / stats.std[None, :, None, :]
    return stats.denormalize(predict_array(params, x, graph, config))


def impulse_response(params: Params, config: ModelConfig, graph: ZoneGraph, windows: WindowSet,
                     stats: NormalizationStats, spec: ImpulseSpec, std=None,
                     dynamic=None) -> list[ResponseRecord]:
    """One record per (zone, magnitude) from raw (unnormalized) ``windows``.

    ``std`` holds per-zone price standard deviations for ``std`` impulses.
    """
    if spec.kind == "std" and std is None:
        raise ValueError("std impulses need per-zone price standard deviations")
    edges = as_edge_index(graph)
    base = _forecast(params, windows.x, stats, edges, config)
    records = []
    for zone in resolve_zones(spec, graph, dynamic):
        dist = graph.hop_distances(zone)
        for m in spec.magnitudes:
            x = perturb(windows, zone, m, spec.kind, std)
            delta = _forecast(params, x, stats, edges, config) - base
            rel_price = float(np.mean(x[:, zone, :, PRICE] / windows.x[:, zone, :, PRICE] - 1.0))
            hops, hop_rel = {}, {}
            for h in range(1, MAX_HOP + 1):
                members = dist == h
                if members.any():
                    hops[h] = float(delta[:, members].mean())
                    hop_rel[h] = _relative(delta[:, members], base[:, members])
            local = float(delta[:, zone].mean())
            records.append(ResponseRecord(zone, float(m), local, hops,
                                          _relative(delta[:, zone], base[:, zone]),
                                          rel_price, hop_rel))
    return records


def _relative(delta, base) -> float:
    """Mean change over mean base forecast, guarded against a zero base."""
    level = float(np.mean(base))
    return float(np.mean(delta)) / level if abs(level) > 1e-12 else 0.0


def opposite_sign_rate(records, magnitude: float | None = None) -> float:
    """Share of records whose local response has the opposite sign to the impulse."""
    rows = [r for r in records if magnitude is None or r.magnitude == magnitude]
    if not rows:
        raise ValueError("no records for the requested magnitude")
    return float(np.mean([np.sign(r.local) == -np.sign(r.magnitude) for r in rows]))


def spillover_by_hop(records) -> dict:
    """magnitude -> {hop: mean signed response}; hop 0 is the impulsed zone.

    Hops with no members in any record (for example on a single-node graph)
    are left out.
    """
    summary: dict = {}
    for m in sorted({r.magnitude for r in records}):
        rows = [r for r in records if r.magnitude == m]
        out = {0: float(np.mean([r.local for r in rows]))}
        for h in range(1, MAX_HOP + 1):
            vals = [r.hops[h] for r in rows if h in r.hops]
            if vals:
                out[h] = float(np.mean(vals))
        summary[m] = out
    return summary


RESPONSE_HEADER = ["zone", "hop", "magnitude", "delta", "relative", "elasticity"]


def write_responses(path, records) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RESPONSE_HEADER)
        for r in records:
            w.writerow([r.zone, 0, repr(r.magnitude), repr(r.local), repr(r.relative),
                        repr(r.elasticity)])
            for h in sorted(r.hops):
                ratio = r.hop_relative[h] / r.price_change if r.price_change else 0.0
                w.writerow([r.zone, h, repr(r.magnitude), repr(r.hops[h]), repr(r.hop_relative[h]),
                            repr(ratio)])


# ---------------------------------------------------------------- ablation

ABLATION_HEADER = ["horizon", "variant", "rmse", "mape", "rae", "mae", "val_mse"]


@dataclass(frozen=True)
class AblationRow:
    horizon: int
    variant: str
    rmse: float
    mape: float
    rae: float
    mae: float
    val_mse: float


def ablate(graph, panel, horizons, base_config: ModelConfig, train, meta, laws, variants=None,
           progress: bool = False) -> list[AblationRow]:
    """Every variant at every horizon, paired on splits, seed and initial draw."""
    variants = VARIANTS if variants is None else tuple(variants)
    rows = []
    for horizon in horizons:
        prepared = prepare(graph, panel, base_config.window, horizon)
        cfg = replace(train, horizon=horizon, window=base_config.window)
        for variant in variants:
            run = run_variant(prepared, variant, base_config, cfg, meta, laws, progress)
            r = run.report
            rows.append(AblationRow(horizon, variant, r.rmse, r.mape, r.rae, r.mae,
                                    run.fit.best_val_loss))
    return rows


def average_rmse(rows) -> dict:
    """variant -> RMSE averaged over horizons."""
    out: dict = {}
    for r in rows:
        out.setdefault(r.variant, []).append(r.rmse)
    return {k: float(np.mean(v)) for k, v in out.items()}


def write_ablation(path, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow([r.horizon, r.variant, repr(r.rmse), repr(r.mape), repr(r.rae), repr(r.mae),
                        repr(r.val_mse)])
