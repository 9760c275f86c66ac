"""The candidate spatio-temporal operations.

Five transforms share the uniform signature (B, T, N, d) -> (B, T, N, d):

    GCN   bidirectional diffusion convolution over the graph
    CNN   gated 1-D dilated causal convolution along time
    RNN   per-node LSTM over the time axis
    TX    scaled dot-product attention over time, per node
    TX_S  the same attention over nodes, per time step

Each operation owns its trainable parameters; ``apply`` dispatches on kind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import tensor as T
from .graph import DiffusionWeights, diffusion_conv
from .tensor import ShapeError, Tensor


class OperationKind(IntEnum):
    """Fixed ordering; the index doubles as the selection-logit index."""

    GCN = 0
    RNN = 1
    CNN = 2
    TX = 3
    TX_S = 4


ALL_KINDS = tuple(OperationKind)


@dataclass(frozen=True)
class OpConfig:
    """Operation hyper-parameters shared by every module in a model."""

    diffusion_steps: int = 2
    cnn_kernel: int = 2
    cnn_dilation: int = 1
    attention_sampling: str = "dense"  # "dense" or "topu"


class StOperation:
    """One candidate operation: a kind plus its parameter record."""

    def __init__(self, kind, hidden_dim, params, graph=None, config=OpConfig()):
        self.kind = kind
        self.hidden_dim = hidden_dim
        self.params = params
        self.graph = graph
        self.config = config

    def parameters(self):
        kind = self.kind.name.lower()
        if self.kind == OperationKind.GCN:
            return [(f"{kind}.{n}", p) for n, p in self.params.parameters()]
        return [(f"{kind}.{n}", p) for n, p in self.params.items()]


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def make_operation(kind, d, graph=None, rng=None, config=OpConfig(), dtype=np.float64):
    """Build a freshly initialized operation of the given kind.

    Matrices draw uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); the LSTM
    forget-gate bias starts at 1 and all other biases at 0.
    """
    if d < 1:
        raise ShapeError(f"hidden dim must be >= 1, got {d}")
    kind = OperationKind(kind)
    if rng is None:
        rng = np.random.default_rng(0)
    if kind == OperationKind.GCN:
        if graph is None:
            raise ValueError("GCN operation requires a graph")
        return StOperation(kind, d, DiffusionWeights(config.diffusion_steps, d, d, rng, dtype),
                           graph=graph, config=config)
    if kind == OperationKind.CNN:
        k = config.cnn_kernel
        params = {
            "w3": _uniform(rng, (k, d, d), k * d, dtype),
            "w4": _uniform(rng, (k, d, d), k * d, dtype),
        }
        return StOperation(kind, d, params, config=config)
    if kind == OperationKind.RNN:
        bias = np.zeros(4 * d, dtype=dtype)
        bias[d:2 * d] = 1.0  # forget gate
        params = {
            "wx": _uniform(rng, (d, 4 * d), d, dtype),
            "wh": _uniform(rng, (d, 4 * d), d, dtype),
            "b": Tensor(bias, requires_grad=True),
        }
        return StOperation(kind, d, params, config=config)
    # TX / TX_S
    params = {
        "wq": _uniform(rng, (d, d), d, dtype),
        "wk": _uniform(rng, (d, d), d, dtype),
        "wv": _uniform(rng, (d, d), d, dtype),
    }
    return StOperation(kind, d, params, config=config)


def _check_block(z, d):
    if z.ndim != 4:
        raise ShapeError(f"expected (B,T,N,d) block, got {z.shape}")
    if z.shape[-1] != d:
        raise ShapeError(f"channel mismatch: block has {z.shape[-1]}, operation has {d}")


def op_cnn(z, params, config):
    """Gated dilated causal convolution: (z*W3) ⊙ sigmoid(z*W4)."""
    lin = T.conv1d_time(z, params["w3"], dilation=config.cnn_dilation)
    gate = T.sigmoid(T.conv1d_time(z, params["w4"], dilation=config.cnn_dilation))
    return T.mul(lin, gate)


def op_rnn(z, params):
    """LSTM over the time axis; nodes fold into the batch so every node runs
    an independent recurrence with shared parameters."""
    b, t, n, d = z.shape
    wx, wh, bias = params["wx"], params["wh"], params["b"]
    zf = T.reshape(T.transpose(z, (0, 2, 1, 3)), (b * n, t, d))
    xg = T.matmul(zf, wx)  # all input-to-gate products at once
    h = Tensor(np.zeros((b * n, d), dtype=z.dtype))
    c = Tensor(np.zeros((b * n, d), dtype=z.dtype))
    steps = []
    for s in range(t):
        gates = T.add(T.add(T.reshape(T.slice_axis(xg, 1, s, s + 1), (b * n, 4 * d)),
                            T.matmul(h, wh)), bias)
        i = T.sigmoid(T.slice_axis(gates, 1, 0, d))
        f = T.sigmoid(T.slice_axis(gates, 1, d, 2 * d))
        g = T.tanh(T.slice_axis(gates, 1, 2 * d, 3 * d))
        o = T.sigmoid(T.slice_axis(gates, 1, 3 * d, 4 * d))
        c = T.add(T.mul(f, c), T.mul(i, g))
        h = T.mul(o, T.tanh(c))
        steps.append(T.reshape(h, (b * n, 1, d)))
    out = T.concat(steps, 1)
    return T.transpose(T.reshape(out, (b, n, t, d)), (0, 2, 1, 3))


def _attend(zf, params, sampling):
    """Scaled dot-product attention over axis 1 of a (G, S, d) block."""
    g_, s_, d = zf.shape
    q = T.matmul(zf, params["wq"])
    k = T.matmul(zf, params["wk"])
    v = T.matmul(zf, params["wv"])
    scores = T.scalar_mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))
    attended = T.matmul(T.softmax(scores, axis=-1), v)
    if sampling == "dense":
        return attended
    if sampling != "topu":
        raise ValueError(f"unknown attention sampling mode {sampling!r}")
    # top-u query sampling: only the u queries with the largest
    # max-minus-mean score keep their attention row, the rest emit the mean
    # value vector. Selection is treated as locally constant.
    u = max(1, math.ceil(math.log(s_))) if s_ > 1 else 1
    sparsity = scores.data.max(axis=-1) - scores.data.mean(axis=-1)  # (G, S)
    keep = np.zeros((g_, s_, 1), dtype=zf.dtype)
    top = np.argsort(-sparsity, axis=1, kind="stable")[:, :u]
    np.put_along_axis(keep, top[:, :, None], 1.0, axis=1)
    mask = Tensor(keep)
    mean_v = T.reduce_mean(v, axis=1, keepdims=True)
    return T.add(T.mul(mask, attended), T.mul(Tensor(1.0 - keep), mean_v))


def op_tx(z, params, config):
    """Attention over the time axis, independently per node."""
    b, t, n, d = z.shape
    zf = T.reshape(T.transpose(z, (0, 2, 1, 3)), (b * n, t, d))
    out = _attend(zf, params, config.attention_sampling)
    return T.transpose(T.reshape(out, (b, n, t, d)), (0, 2, 1, 3))


def op_tx_s(z, params, config):
    """op_tx on the spatially transposed block: attention over nodes."""
    swapped = T.transpose(z, (0, 2, 1, 3))
    out = op_tx(swapped, params, config)
    return T.transpose(out, (0, 2, 1, 3))


def apply(op, z):
    """Run one operation on a feature block; shape-preserving."""
    _check_block(z, op.hidden_dim)
    if op.kind == OperationKind.GCN:
        return diffusion_conv(z, op.graph, op.params)
    if op.kind == OperationKind.CNN:
        return op_cnn(z, op.params, op.config)
    if op.kind == OperationKind.RNN:
        return op_rnn(z, op.params)
    if op.kind == OperationKind.TX:
        return op_tx(z, op.params, op.config)
    if op.kind == OperationKind.TX_S:
        return op_tx_s(z, op.params, op.config)
    raise ValueError(f"unknown operation kind {op.kind!r}")
