"""Parameter layout and forward pass of the complete forecaster."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .decoder import decode
from .embedding import EmbeddingConfig, as_edge_index, embed

Params = dict  # name -> np.ndarray


@dataclass(frozen=True)
class ModelConfig:
    window: int = 12
    features: int = 2
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    use_gat: bool = True
    use_tpa: bool = True

    @property
    def hidden(self) -> int:
        return self.embedding.layers * self.features

    @property
    def conv_length(self) -> int:
        return self.embedding.conv_length(self.window)

    def variant(self, name: str) -> "ModelConfig":
        if name in ("full", "no_pretrain"):
            return replace(self, use_gat=True, use_tpa=True)
        if name == "no_gat":
            return replace(self, use_gat=False, use_tpa=True)
        if name == "no_tpa":
            return replace(self, use_gat=True, use_tpa=False)
        raise ValueError(f"unknown variant {name!r}")


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: ModelConfig, rng: np.random.Generator) -> Params:
    F, D = config.features, config.hidden
    M, K = config.embedding.layers, config.embedding.heads
    kh = config.embedding.kernel_height
    L = config.conv_length
    p: Params = {
        "conv_kernel": _glorot(rng, (F, kh, F), kh * F, F),
        "conv_bias": np.zeros(F),
    }
    for m in range(1, M + 1):
        p[f"gat{m}_W"] = _glorot(rng, (K, F, F), F, F)
        p[f"gat{m}_a"] = _glorot(rng, (K, 2 * F), 2 * F, 1)
    p["lstm_Wx"] = _glorot(rng, (4 * D, D), D, D)
    p["lstm_Wh"] = _glorot(rng, (4 * D, D), D, D)
    p["lstm_bx"] = np.zeros(4 * D)
    p["lstm_bh"] = np.zeros(4 * D)
    p["tpa_filters"] = _glorot(rng, (M, F, L), F * L, 1)
    p["tpa_Walpha"] = _glorot(rng, (M, M), M, M)
    p["out_Wp"] = _glorot(rng, (M,), M, 1)
    return p


def used_parameters(config: ModelConfig) -> list[str]:
    names = ["conv_kernel", "conv_bias", "lstm_Wx", "lstm_Wh", "lstm_bx", "lstm_bh", "out_Wp"]
    if config.use_gat:
        for m in range(1, config.embedding.layers + 1):
            names += [f"gat{m}_W", f"gat{m}_a"]
    if config.use_tpa:
        names += ["tpa_filters", "tpa_Walpha"]
    return names


def forward(params: dict, x, graph, config: ModelConfig) -> dc.Tensor:
    """Normalized occupancy forecasts (B, N) for windows ``x`` of shape (B, N, w, F)."""
    z = embed(x, graph, params, config.embedding, use_gat=config.use_gat)
    return decode(z, params, config.embedding.layers, use_tpa=config.use_tpa)


def mse(pred, target) -> dc.Tensor:
    pred, target = dc._lift(pred), dc._lift(target)
    if pred.shape != target.shape:
        raise dc.ShapeError("mse", f"prediction {pred.shape} vs target {target.shape}")
    return dc.mean(dc.square(pred - target))


def as_constants(params: Params) -> dict:
    return {k: dc.constant(v) for k, v in params.items()}


def as_leaves(params: Params) -> dict:
    return {k: dc.parameter(v, name=k) for k, v in params.items()}


def predict_array(params: Params, x: np.ndarray, graph, config: ModelConfig,
                  chunk: int = 256) -> np.ndarray:
    consts = as_constants(params)
    graph = as_edge_index(graph)
    out = [forward(consts, x[i:i + chunk], graph, config).data for i in range(0, len(x), chunk)]
    if not out:
        return np.zeros((0, x.shape[1]))
    return np.concatenate(out, axis=0)


def loss_and_grad(params: Params, x: np.ndarray, y: np.ndarray, graph,
                  config: ModelConfig, chunk: int = 256) -> tuple[float, Params]:
    """Mean squared error over all windows and its gradient, evaluated in chunks."""
    total = 0.0
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    n = len(x)
    graph = as_edge_index(graph)
    for i in range(0, n, chunk):
        leaves = as_leaves(params)
        xb, yb = x[i:i + chunk], y[i:i + chunk]
        loss = mse(forward(leaves, xb, graph, config), yb)
        g = dc.backward(loss, leaves)
        weight = len(xb) / n
        total += weight * float(loss.data)
        for k in grads:
            grads[k] += weight * g[k]
    return total, grads
