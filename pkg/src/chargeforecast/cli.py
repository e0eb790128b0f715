"""Command-line entry point: ``chargeforecast <command> [options]``.

Commands follow the workflow order: synth-data, pretrain, train, predict,
evaluate, impulse, ablate. Each reads the experiment config (``--config``,
defaults when omitted), and ``--seed``, ``--horizon`` and ``--out`` override
the corresponding config entries. Failures print one line
``error: <kind>: <detail>`` to stderr and exit nonzero (2 for missing files
and bad configuration, 1 otherwise).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .analysis import (ImpulseSpec, ablate, detect_dynamic_zones, impulse_response, price_std,
                       probe_windows, spillover_by_hop, write_ablation, write_responses)
from .config import ConfigError, ExperimentConfig
from .data import DataError, build_windows, load_graph, load_panel
from .market import generate, write_market
from .model import predict_array
from .pipeline import finetune, initial_params, prepare, pretrain
from .training import TrainingDiverged, evaluate, write_metrics

log = logging.getLogger("chargeforecast")

NODES, EDGES, SERIES = "nodes.csv", "edges.csv", "timeseries.csv"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def load_dataset(cfg: ExperimentConfig):
    d = Path(cfg.data_dir)
    graph = load_graph(d / NODES, d / EDGES)
    panel = load_panel(d / SERIES, graph)
    return graph, panel


def out_dir(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def model_path(cfg, horizon) -> Path:
    return Path(cfg.output_dir) / f"model_h{horizon}.npz"


def pretrained_path(cfg, horizon) -> Path:
    return Path(cfg.output_dir) / f"pretrained_h{horizon}.npz"


def _checkpoint(cfg, args, default: Path) -> ckpt_io.Checkpoint:
    path = Path(args.checkpoint) if args.checkpoint else default
    ck = ckpt_io.load(path)
    if ck.horizon is not None and ck.horizon != cfg.train.horizon:
        raise UsageError(f"checkpoint {path} was trained for horizon {ck.horizon}, "
                         f"not {cfg.train.horizon}")
    return ck


def _save_model(path, params, cfg, prepared, note: str):
    return ckpt_io.save(path, ckpt_io.Checkpoint(params, cfg.model, prepared.stats, prepared.horizon,
                                                 cfg.digest(), {"stage": note}))


# ---------------------------------------------------------------- commands

def cmd_synth_data(cfg, args):
    graph, panel, truth = generate(cfg.market)
    target = Path(args.out) if args.out else Path(cfg.data_dir)
    paths = write_market(target, graph, panel, truth)
    (target / "dynamic_zones.txt").write_text(
        "".join(f"{z}\n" for z in truth.dynamic_zones), encoding="utf-8")
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))


def cmd_pretrain(cfg, args):
    graph, panel = load_dataset(cfg)
    prepared = prepare(graph, panel, cfg.train.window, cfg.train.horizon)
    params = initial_params(cfg.model, cfg.seed)
    params, history = pretrain(prepared, cfg.model, params, cfg.meta, cfg.laws, cfg.seed,
                               args.verbose)
    out = out_dir(cfg)
    with (out / f"pretrain_history_h{prepared.horizon}.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "query_loss"])
        w.writerows([e, repr(v)] for e, v in enumerate(history))
    _save_model(pretrained_path(cfg, prepared.horizon), params, cfg, prepared, "pretrained")


def cmd_train(cfg, args):
    graph, panel = load_dataset(cfg)
    prepared = prepare(graph, panel, cfg.train.window, cfg.train.horizon)
    if args.from_checkpoint:
        start = ckpt_io.load(args.from_checkpoint)
        if start.model != cfg.model:
            raise UsageError(f"checkpoint {args.from_checkpoint} has a different model layout")
        params = start.params
    else:
        params = initial_params(cfg.model, cfg.seed)
    result = finetune(prepared, cfg.model, params, cfg.train, args.verbose)
    out = out_dir(cfg)
    result.write_history(out / f"history_h{prepared.horizon}.csv")
    _save_model(model_path(cfg, prepared.horizon), result.params, cfg, prepared,
                "finetuned" if args.from_checkpoint else "trained")


def cmd_predict(cfg, args):
    graph, panel = load_dataset(cfg)
    ck = _checkpoint(cfg, args, model_path(cfg, cfg.train.horizon))
    w, horizon = ck.model.window, ck.horizon or cfg.train.horizon
    origin = panel.length if args.origin is None else args.origin
    if not w <= origin <= panel.length:
        raise UsageError(f"origin {origin} outside [{w}, {panel.length}]")
    segment = panel.segment(origin - w, origin)
    x = np.transpose(segment.values, (0, 2, 1))[None]           # (1, N, w, F)
    xn = (x - ck.stats.mean[None, :, None, :]) / ck.stats.std[None, :, None, :]
    pred = ck.stats.denormalize(predict_array(ck.params, xn, graph, ck.model))[0]
    path = out_dir(cfg) / "predictions.csv"
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["zone_id", "origin", "target_timestamp", "occupancy"])
        for z, v in enumerate(pred):
            wr.writerow([z, panel.start + origin, panel.start + origin - 1 + horizon, repr(float(v))])


def cmd_evaluate(cfg, args):
    graph, panel = load_dataset(cfg)
    ck = _checkpoint(cfg, args, model_path(cfg, cfg.train.horizon))
    prepared = prepare(graph, panel, ck.model.window, cfg.train.horizon)
    stats = ck.stats or prepared.stats
    test = stats.normalize_windows(build_windows(prepared.test, ck.model.window, prepared.horizon))
    report = evaluate(ck.params, ck.model, prepared.edges, test, stats)
    write_metrics(out_dir(cfg) / f"metrics_h{prepared.horizon}.csv", [report])


def cmd_impulse(cfg, args):
    graph, panel = load_dataset(cfg)
    ck = _checkpoint(cfg, args, model_path(cfg, cfg.train.horizon))
    spec = cfg.impulse
    if args.kind or args.magnitudes or args.zones:
        zones = spec.zones
        if args.zones:
            zones = args.zones if args.zones in ("all", "dynamic") else \
                tuple(int(z) for z in args.zones.split(","))
        kind = args.kind or spec.kind
        mags = tuple(float(m) for m in args.magnitudes.split(",")) if args.magnitudes else \
            spec.magnitudes
        spec = replace(spec, kind=kind, magnitudes=mags, zones=zones)
    prepared = prepare(graph, panel, ck.model.window, cfg.train.horizon)
    windows = probe_windows(build_windows(prepared.test, ck.model.window, prepared.horizon),
                            spec.max_windows)
    records = impulse_response(ck.params, ck.model, graph, windows, ck.stats or prepared.stats,
                               spec, std=price_std(prepared.train),
                               dynamic=detect_dynamic_zones(prepared.train))
    write_responses(out_dir(cfg) / "responses.csv", records)
    for m, hops in spillover_by_hop(records).items():
        log.info("magnitude %g: %s", m, ", ".join(f"hop {h} {v:+.5f}" for h, v in hops.items()))


def cmd_ablate(cfg, args):
    graph, panel = load_dataset(cfg)
    horizons = (cfg.train.horizon,) if args.horizon else cfg.horizons
    rows = ablate(graph, panel, horizons, cfg.model, cfg.train, cfg.meta, cfg.laws,
                  progress=args.verbose)
    write_ablation(out_dir(cfg) / "ablation.csv", rows)


COMMANDS = {
    "synth-data": (cmd_synth_data, "generate a synthetic market dataset"),
    "pretrain": (cmd_pretrain, "law-informed meta-learning pre-training"),
    "train": (cmd_train, "fit on the training split (optionally from a checkpoint)"),
    "predict": (cmd_predict, "per-zone forecast for one origin"),
    "evaluate": (cmd_evaluate, "test-split metrics"),
    "impulse": (cmd_impulse, "counterfactual price impulse responses"),
    "ablate": (cmd_ablate, "ablation table over variants and horizons"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment YAML file (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--horizon", type=int, help="forecast horizon in steps")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="dataset directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = argparse.ArgumentParser(prog="chargeforecast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {name: sub.add_parser(name, parents=[common], help=text)
            for name, (_, text) in COMMANDS.items()}
    subs["train"].add_argument("--from-checkpoint", help="start from these parameters")
    for name in ("predict", "evaluate", "impulse"):
        subs[name].add_argument("--checkpoint", help="model checkpoint (default: out/model_h<H>.npz)")
    subs["predict"].add_argument("--origin", type=int,
                                 help="first step after the input window (default: end of data)")
    subs["impulse"].add_argument("--kind", choices=("percentile", "std"))
    subs["impulse"].add_argument("--magnitudes", help="comma-separated impulse magnitudes")
    subs["impulse"].add_argument("--zones", help="all, dynamic, or comma-separated zone ids")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        out = None if args.command == "synth-data" else args.out
        cfg = cfg.override(seed=args.seed, horizon=args.horizon, output_dir=out, data_dir=args.data)
        COMMANDS[args.command][0](cfg, args)
    except FileNotFoundError as exc:
        path = exc.filename or (exc.args[0] if exc.args else "")
        print(f"error: missing-file: {path}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except (UsageError, DataError, ckpt_io.CheckpointError, TrainingDiverged, ValueError) as exc:
        kind = {UsageError: "usage", DataError: "data", ckpt_io.CheckpointError: "checkpoint",
                TrainingDiverged: "diverged"}.get(type(exc), "invalid")
        print(f"error: {kind}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
