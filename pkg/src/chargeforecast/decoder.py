"""LSTM decoder with hop-wise temporal pattern attention.

Every node is decoded independently with shared weights, so all functions
here take tensors with arbitrary leading (batch, node) axes.

Shapes, with D = M*F hidden units split into M hop blocks of F units:

* hidden history H: (..., D, L), columns h_0 .. h_{L-1} (h_0 is the zero state)
* filters: (M, F, L); filter m applied to hop block k gives HC[..., m, k]
* pooled last state hP: (..., M), the per-block mean of h_L
* scores alpha[..., m, k] = sigmoid(hP[k] * HC[m, k])
* context v[k] = sum_m alpha[m, k] * HC[m, k]
* y = W_p . (W_alpha v + hP)
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc

GATES = ("input", "forget", "cell", "output")


def lstm_forward(seq, Wx, Wh, bx, bh):
    """Run one LSTM layer over ``seq`` of shape (..., L, D).

    Gate weights are stacked row-wise in the order input, forget, cell,
    output: ``Wx`` and ``Wh`` are (4D, D), ``bx`` and ``bh`` are (4D,).
    Returns the hidden states h_0 .. h_L (h_0 = 0) and the final cell state.
    """
    seq = dc._lift(seq)
    D = seq.shape[-1]
    L = seq.shape[-2]
    lead = seq.shape[:-2]
    WxT, WhT = dc.transpose(Wx), dc.transpose(Wh)
    h = dc.constant(np.zeros(lead + (D,)))
    c = dc.constant(np.zeros(lead + (D,)))
    bias = dc.add(bx, bh)
    states = [h]
    for t in range(L):
        x_t = seq[..., t, :]
        if lead:
            z = dc.matmul(x_t, WxT) + dc.matmul(h, WhT) + bias
        else:
            z = dc.reshape(dc.matmul(dc.reshape(x_t, (1, D)), WxT)
                           + dc.matmul(dc.reshape(h, (1, D)), WhT), (4 * D,)) + bias
        u = dc.sigmoid(z[..., 0:D])
        f = dc.sigmoid(z[..., D:2 * D])
        g = dc.tanh(z[..., 2 * D:3 * D])
        q = dc.sigmoid(z[..., 3 * D:4 * D])
        c = f * c + u * g
        h = q * dc.tanh(c)
        states.append(h)
    return states, c


def hidden_history(states) -> dc.Tensor:
    """Stack h_0 .. h_{L-1} into (..., D, L); the last state is left out."""
    return dc.stack(states[:-1], axis=-1)


def pooled(h_last, blocks: int) -> dc.Tensor:
    """Average pooling of width F and stride F over the last hidden state."""
    D = h_last.shape[-1]
    F = D // blocks
    return dc.mean(dc.reshape(h_last, h_last.shape[:-1] + (blocks, F)), axis=-1)


def filtered_history(H, filters) -> dc.Tensor:
    """HC[..., m, k]: filter m slid over the hop blocks of H with stride F."""
    M, F, L = filters.shape
    if H.shape[-2] % F or H.shape[-1] != L:
        raise dc.ShapeError("filtered_history", f"history {H.shape} incompatible with filters {filters.shape}")
    hc = dc.conv2d(H, filters, stride=(F, 1))                         # (..., M, blocks, 1)
    return dc.reshape(hc, hc.shape[:-1])


def tpa_scores(H, h_last, filters) -> tuple[dc.Tensor, dc.Tensor, dc.Tensor]:
    """Sigmoid attention scores over hop blocks; returns (alpha, HC, hP)."""
    H, h_last, filters = dc._lift(H), dc._lift(h_last), dc._lift(filters)
    M = filters.shape[0]
    blocks = H.shape[-2] // filters.shape[1]
    if blocks != M:
        raise dc.ShapeError("tpa_scores", f"{blocks} hop blocks but {M} filters")
    HC = filtered_history(H, filters)
    hP = pooled(h_last, blocks)
    lead = hP.shape[:-1]
    alpha = dc.sigmoid(HC * dc.reshape(hP, lead + (1, blocks)))
    return alpha, HC, hP


def predict(alpha, HC, hP, W_alpha, W_p) -> dc.Tensor:
    """Scalar forecast per node from the attended context and pooled state."""
    v = dc.sum(dc._lift(alpha) * HC, axis=-2)                         # (..., M)
    z = _vecmat(v, dc.transpose(W_alpha)) + hP
    return _vecmat(z, dc.reshape(W_p, (-1, 1)), squeeze=True)


def predict_without_attention(hP, W_p) -> dc.Tensor:
    """Linear head on the pooled last hidden state (attention term removed)."""
    return _vecmat(dc._lift(hP), dc.reshape(W_p, (-1, 1)), squeeze=True)


def _vecmat(v, W, squeeze: bool = False) -> dc.Tensor:
    lead = v.shape[:-1]
    flat = dc.reshape(v, (-1, v.shape[-1]))
    out = dc.matmul(flat, W)
    shape = lead if squeeze else lead + (W.shape[-1],)
    return dc.reshape(out, shape)


def decode(seq, params: dict, layers: int, use_tpa: bool = True) -> dc.Tensor:
    """Decoder forward for embedded sequences (..., L, M*F) -> (...)."""
    states, _ = lstm_forward(seq, params["lstm_Wx"], params["lstm_Wh"],
                             params["lstm_bx"], params["lstm_bh"])
    if not use_tpa:
        return predict_without_attention(pooled(states[-1], layers), params["out_Wp"])
    alpha, HC, hP = tpa_scores(hidden_history(states), states[-1], params["tpa_filters"])
    return predict(alpha, HC, hP, params["tpa_Walpha"], params["out_Wp"])
