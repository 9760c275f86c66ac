"""Graph representation and diffusion convolution.

The graph is a static weighted adjacency over N nodes. Diffusion convolution
mixes node features with powers of the row-normalized forward and backward
transition matrices (a K-step random walk in each edge direction), applied
independently per (batch, time) slice:

    out = sum_k  P_f^k Z W1_k  +  P_b^k Z W2_k,      P^0 = I
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class GraphError(ValueError):
    """Invalid adjacency or node-count mismatch."""


def build_transition_matrices(adjacency):
    """Row-normalized forward/backward transition matrices.

    Forward rows divide by out-degree, backward rows (of the transpose) by
    in-degree. Zero-degree rows stay all-zero so isolated nodes only keep
    their k=0 self term.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise GraphError(f"adjacency must be square, got shape {a.shape}")
    if np.any(a < 0):
        raise GraphError("adjacency entries must be non-negative")

    def _normalize(m):
        deg = m.sum(axis=1)
        out = np.zeros_like(m)
        nz = deg > 0
        out[nz] = m[nz] / deg[nz, None]
        return out

    return _normalize(a), _normalize(a.T)


class Graph:
    """Static weighted graph with precomputed transition matrices.

    Immutable after construction; safe to share read-only.
    """

    def __init__(self, adjacency):
        self.adjacency = np.asarray(adjacency, dtype=np.float64)
        self.fwd_transition, self.bwd_transition = build_transition_matrices(self.adjacency)
        self.n_nodes = self.adjacency.shape[0]
        self._powers = {}

    def transition_powers(self, steps):
        """[(P_f^k, P_b^k) for k = 0..steps], cached (the graph is static)."""
        key = steps
        if key not in self._powers:
            powers = [(np.eye(self.n_nodes), np.eye(self.n_nodes))]
            for _ in range(steps):
                pf, pb = powers[-1]
                powers.append((pf @ self.fwd_transition, pb @ self.bwd_transition))
            self._powers[key] = powers
        return self._powers[key]


class DiffusionWeights:
    """Trainable filters, one (d_in, d_out) matrix per step and direction."""

    def __init__(self, steps, d_in, d_out, rng, dtype=np.float64):
        if steps < 0:
            raise GraphError("diffusion steps must be >= 0")
        self.steps = steps
        bound = 1.0 / np.sqrt(d_in)
        self.w1 = [Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype), requires_grad=True)
                   for _ in range(steps + 1)]
        self.w2 = [Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype), requires_grad=True)
                   for _ in range(steps + 1)]

    def parameters(self):
        return [(f"w1.{k}", w) for k, w in enumerate(self.w1)] + \
               [(f"w2.{k}", w) for k, w in enumerate(self.w2)]


def _propagate(z, matrix):
    """Apply an (N, N) matrix over the node axis of a (B, T, N, d) block."""
    b, t, n, d = z.shape
    m = Tensor(np.ascontiguousarray(matrix, dtype=z.dtype))
    zt = T.transpose(z, (2, 0, 1, 3))          # (N, B, T, d)
    zt = T.reshape(zt, (n, b * t * d))
    mixed = T.matmul(m, zt)
    mixed = T.reshape(mixed, (n, b, t, d))
    return T.transpose(mixed, (1, 2, 0, 3))


def _channel_map(z, w):
    """Apply a (d_in, d_out) matrix over the channel axis."""
    b, t, n, d_in = z.shape
    flat = T.reshape(z, (b * t * n, d_in))
    out = T.matmul(flat, w)
    return T.reshape(out, (b, t, n, w.shape[1]))


def diffusion_conv(z, graph, weights):
    """K-step bidirectional diffusion convolution on a (B, T, N, d) block."""
    if z.ndim != 4:
        raise ShapeError(f"diffusion_conv: expected (B,T,N,d) input, got {z.shape}")
    if z.shape[2] != graph.n_nodes:
        raise GraphError(f"diffusion_conv: input has {z.shape[2]} nodes, graph has {graph.n_nodes}")
    powers = graph.transition_powers(weights.steps)
    out = None
    for k in range(weights.steps + 1):
        pf, pb = powers[k]
        if k == 0:
            term = T.add(_channel_map(z, weights.w1[0]), _channel_map(z, weights.w2[0]))
        else:
            term = T.add(_channel_map(_propagate(z, pf), weights.w1[k]),
                         _channel_map(_propagate(z, pb), weights.w2[k]))
        out = term if out is None else T.add(out, term)
    return out
