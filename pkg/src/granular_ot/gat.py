"""Single-head graph attention layer that turns patches into region super-nodes.

For node i with neighbourhood N(i), the attention logit towards j is
``leaky_relu(a_s . (theta_s x_i) + a_t . (theta_t x_j))``, normalized over
N(i) plus i itself.  The self term is carried by ``theta_s`` and the
neighbour terms by ``theta_t``.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import as_tensor, gather_rows, leaky_relu, matmul, neighbor_sum, softmax_rows
from .errors import InputError


@dataclass
class GatParams:
    theta_s: object
    theta_t: object
    a_s: object
    a_t: object
    slope: float = 0.2

    @classmethod
    def init(cls, d, rng, slope=0.2):
        """Uniform in [-1/sqrt(d), 1/sqrt(d)]; attention vectors are (d, 1)."""
        bound = 1.0 / np.sqrt(d)
        return cls(
            theta_s=rng.uniform(-bound, bound, (d, d)),
            theta_t=rng.uniform(-bound, bound, (d, d)),
            a_s=rng.uniform(-bound, bound, (d, 1)),
            a_t=rng.uniform(-bound, bound, (d, 1)),
            slope=slope,
        )

    @classmethod
    def identity(cls, d, slope=0.2):
        """theta = I and zero attention vectors: uniform neighbourhood averaging."""
        return cls(np.eye(d), np.eye(d), np.zeros((d, 1)), np.zeros((d, 1)), slope)

    def arrays(self):
        return {"theta_s": self.theta_s, "theta_t": self.theta_t, "a_s": self.a_s, "a_t": self.a_t}


def gat_attention(graph, X, params, table=None):
    """Return (alpha, index, mask, S, T) for reuse by callers and tests.

    ``alpha`` has one row per node over its padded neighbour table, column 0
    being the node itself.
    """
    X = as_tensor(X)
    if X.ndim != 2 or X.shape[0] != graph.num_nodes:
        raise InputError(f"features {X.shape} do not match a graph of {graph.num_nodes} nodes")
    d = X.shape[1]
    th_s, th_t = as_tensor(params.theta_s), as_tensor(params.theta_t)
    a_s, a_t = as_tensor(params.a_s), as_tensor(params.a_t)
    if th_s.shape != (d, d) or th_t.shape != (d, d) or a_s.shape != (d, 1) or a_t.shape != (d, 1):
        raise InputError(f"GAT parameter shapes do not match feature width {d}")
    index, mask = graph.neighbor_table() if table is None else table
    S = matmul(X, th_s.T)
    T = matmul(X, th_t.T)
    src = matmul(S, a_s)
    dst = matmul(T, a_t)
    logits = leaky_relu(src + gather_rows(dst, index).reshape(index.shape), params.slope)
    alpha = softmax_rows(logits, mask=mask)
    return alpha, index, mask, S, T


def gat_forward(graph, X, params, table=None):
    """Region-aggregated node features, same shape as ``X``."""
    alpha, index, mask, S, T = gat_attention(graph, X, params, table)
    out = alpha[:, 0:1] * S
    if index.shape[1] > 1:
        out = out + neighbor_sum(alpha[:, 1:], index[:, 1:], T)
    return out
