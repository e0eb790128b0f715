"""Temporal convolution followed by a stack of multi-head graph attention layers.

Tensor layout follows the batch convention (batch, node, time, feature).
The attention stack runs on (batch, time, node, feature) so that every time
step of the convolved sequence is propagated over the graph independently,
with weights shared across time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class EmbeddingConfig:
    layers: int = 2          # M
    heads: int = 4           # K
    beta: float = 0.5        # momentum residual coefficient
    kernel_height: int = 2
    stride: int = 1
    slope: float = 0.2       # LeakyReLU negative slope

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1:
            raise ValueError("layers and heads must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.kernel_height < 1 or self.stride < 1:
            raise ValueError("kernel height and stride must be positive")

    def conv_length(self, w: int) -> int:
        if w < self.kernel_height:
            raise ValueError(f"window {w} shorter than kernel height {self.kernel_height}")
        return (w - self.kernel_height) // self.stride + 1


def temporal_conv(x, kernel, bias, stride: int = 1) -> dc.Tensor:
    """Per-node 2-D convolution over (time, feature).

    ``x`` is (..., w, F); ``kernel`` is (F_out, height, F) so each output
    channel sees the full feature width. Returns (..., w', F_out).
    """
    x = dc._lift(x)
    kernel = dc._lift(kernel)
    if kernel.shape[2] != x.shape[-1]:
        raise dc.ShapeError("temporal_conv", "kernel width must equal the feature count")
    out = dc.conv2d(x, kernel, stride=(stride, 1))          # (..., F_out, w', 1)
    lead = out.shape[:-3]
    out = dc.reshape(out, lead + out.shape[-3:-1])
    nd = out.ndim
    out = dc.transpose(out, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    return out + bias


def gat_similarity(x_i, x_j, W, a, slope: float = 0.2) -> dc.Tensor:
    """Scalar score LeakyReLU(a . [W x_i || W x_j]) for one head."""
    W = dc._lift(W)
    wi = dc.matmul(W, dc.reshape(dc._lift(x_i), (-1, 1)))
    wj = dc.matmul(W, dc.reshape(dc._lift(x_j), (-1, 1)))
    cat = dc.concat([wi, wj], axis=0)
    score = dc.matmul(dc.reshape(dc._lift(a), (1, -1)), cat)
    return dc.reshape(dc.leaky_relu(score, slope), ())


def gat_attention(scores, mask) -> dc.Tensor:
    """Row-wise softmax of dense similarity scores restricted to each neighbor set."""
    return dc.masked_softmax(scores, mask, axis=-1)


@dataclass(frozen=True)
class EdgeIndex:
    """Attention edges (receiver i, sender j) for every j in the neighbor set of i.

    Edges are sorted by receiver so each receiver owns one contiguous segment.
    """

    num_nodes: int
    receivers: np.ndarray
    senders: np.ndarray
    starts: np.ndarray

    @classmethod
    def from_mask(cls, mask) -> "EdgeIndex":
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=1).all():
            raise ValueError("every node needs a non-empty neighbor set")
        recv, send = np.nonzero(mask)
        starts = np.searchsorted(recv, np.arange(mask.shape[0]))
        return cls(mask.shape[0], recv, send, starts)

    @classmethod
    def from_graph(cls, graph) -> "EdgeIndex":
        return cls.from_mask(graph.adjacency_mask())


def as_edge_index(graph) -> EdgeIndex:
    if isinstance(graph, EdgeIndex):
        return graph
    if hasattr(graph, "adjacency_mask"):
        return EdgeIndex.from_graph(graph)
    return EdgeIndex.from_mask(graph)


def gat_layer(X, graph, W, a, slope: float = 0.2, return_attention: bool = False):
    """One multi-head attention layer with head averaging and sigmoid output.

    ``X`` is (..., N, F); ``W`` is (K, F, F) and ``a`` is (K, 2F). ``graph``
    is an EdgeIndex, a ZoneGraph or a boolean N x N neighbor mask. With
    ``return_attention`` the per-edge coefficients (..., K, E) come back too.
    """
    idx = as_edge_index(graph)
    X, W, a = dc._lift(X), dc._lift(W), dc._lift(a)
    K, F, _ = W.shape
    if X.shape[-1] != F:
        raise dc.ShapeError("gat_layer", f"features {X.shape[-1]} do not match weights {W.shape}")
    lead = X.shape[:-2]
    N = X.shape[-2]
    if N != idx.num_nodes:
        raise dc.ShapeError("gat_layer", f"{N} nodes but graph has {idx.num_nodes}")
    Xk = dc.reshape(X, lead + (1, N, F))
    WX = dc.matmul(Xk, dc.transpose(W, (0, 2, 1)))                    # (..., K, N, F)
    a_src = dc.reshape(a[:, :F], (K, F, 1))
    a_dst = dc.reshape(a[:, F:], (K, F, 1))
    s_src = dc.reshape(dc.matmul(WX, a_src), lead + (K, N))
    s_dst = dc.reshape(dc.matmul(WX, a_dst), lead + (K, N))
    e = dc.take(s_src, idx.receivers, axis=-1) + dc.take(s_dst, idx.senders, axis=-1)
    att = dc.segment_softmax(dc.leaky_relu(e, slope), idx.starts, axis=-1)   # (..., K, E)
    msg = dc.take(WX, idx.senders, axis=-2) * dc.reshape(att, att.shape + (1,))
    agg = dc.segment_sum(msg, idx.starts, axis=-2)                    # (..., K, N, F)
    out = dc.sigmoid(dc.mean(agg, axis=-3))
    return (out, att) if return_attention else out


def momentum_residual(outputs, beta: float) -> dc.Tensor:
    """Concatenate (1 - beta) x^m + beta x^(m-1) over layers m = 1..M.

    ``outputs`` holds x^0 (the layer input) followed by the M layer outputs.
    """
    blocks = [outputs[m] * (1.0 - beta) + outputs[m - 1] * beta for m in range(1, len(outputs))]
    return dc.concat(blocks, axis=-1)


def embed(x, graph, params: dict, config: EmbeddingConfig, use_gat: bool = True) -> dc.Tensor:
    """Full embedding stack.

    ``x`` is (B, N, w, F); returns (B, N, w', M*F). With ``use_gat`` off, the
    convolved features are replicated M times in place of the attention stack.
    """
    h = temporal_conv(x, params["conv_kernel"], params["conv_bias"], config.stride)  # (B, N, w', F)
    if not use_gat:
        return dc.concat([h] * config.layers, axis=-1)
    h = dc.transpose(h, (0, 2, 1, 3))                                 # (B, w', N, F)
    graph = as_edge_index(graph)
    outputs = [h]
    for m in range(1, config.layers + 1):
        outputs.append(gat_layer(outputs[-1], graph, params[f"gat{m}_W"], params[f"gat{m}_a"],
                                 config.slope))
    z = momentum_residual(outputs, config.beta)
    return dc.transpose(z, (0, 2, 1, 3))
