"""Versioned parameter checkpoints in a single .npz container.

Parameter arrays are stored under ``param/<name>``; normalization statistics
under ``stats/mean`` and ``stats/std``; everything else (format version,
model configuration, horizon, config digest, free-form notes) as a JSON
string under ``meta``. Arrays keep dtype and shape, so a round trip is
bitwise exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import NormalizationStats
from .embedding import EmbeddingConfig
from .model import ModelConfig, Params

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: Params
    model: ModelConfig
    stats: NormalizationStats | None = None
    horizon: int | None = None
    config_digest: str = ""
    notes: dict = field(default_factory=dict)


def save(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT_VERSION,
        "model": asdict(ckpt.model),
        "horizon": ckpt.horizon,
        "config_digest": ckpt.config_digest,
        "notes": ckpt.notes,
        "params": sorted(ckpt.params),
    }
    arrays = {f"param/{k}": np.asarray(v) for k, v in ckpt.params.items()}
    if ckpt.stats is not None:
        arrays["stats/mean"] = ckpt.stats.mean
        arrays["stats/std"] = ckpt.stats.std
    with path.open("wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            params = {k: z[f"param/{k}"].copy() for k in meta["params"]}
            stats = None
            if "stats/mean" in z.files:
                stats = NormalizationStats(z["stats/mean"].copy(), z["stats/std"].copy())
    except (KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if meta.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')}")
    m = dict(meta["model"])
    m["embedding"] = EmbeddingConfig(**m["embedding"])
    return Checkpoint(params, ModelConfig(**m), stats, meta["horizon"], meta["config_digest"],
                      meta.get("notes", {}))
