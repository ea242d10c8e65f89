"""Learnable visual and textual prompts and the two-granularity pooling.

Visual prompts act as attention queries against the frozen patch features
(patch level) and against the GAT super-node features (group level); the
two pooled prompt sets are blended with a fixed ratio.  Text prompts are
trainable token sequences that share a frozen per-class context and are
embedded by a frozen text encoder.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, concat, layer_norm, matmul, softmax_rows
from .errors import ConfigError, InputError

MAGNIFICATIONS = ("low", "high")


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"fusion alpha must lie in [0, 1], got {self.alpha}")


def _attend(p_v, H, ln_eps=1e-5):
    p_v, H = as_tensor(p_v), as_tensor(H)
    if H.ndim != 2 or H.shape[0] == 0:
        raise InputError("cannot pool an empty bag")
    if p_v.ndim != 2 or p_v.shape[1] != H.shape[1]:
        raise InputError(f"prompt width {p_v.shape} does not match features {H.shape}")
    d = H.shape[1]
    weights = softmax_rows(matmul(p_v, H.T) * (1.0 / np.sqrt(d)))
    return layer_norm(matmul(weights, H), ln_eps) + p_v


def patch_prompting(p_v, H):
    """Pool patch features ``H`` (N x d) with prompt queries ``p_v`` (N_p x d).

    Keys and values are the features themselves.  Output is
    ``layer_norm(softmax(p_v H^T / sqrt(d)) H) + p_v``.
    """
    return _attend(p_v, H)


def group_prompting(p_v, H_gr):
    """Same pooling as :func:`patch_prompting`, over GAT super-node features."""
    return _attend(p_v, H_gr)


def fuse(p_patch, p_group, cfg=FusionConfig()):
    p_patch, p_group = as_tensor(p_patch), as_tensor(p_group)
    if p_patch.shape != p_group.shape:
        raise InputError(f"cannot fuse {p_patch.shape} with {p_group.shape}")
    return p_patch * (1.0 - cfg.alpha) + p_group * cfg.alpha


@dataclass
class TextPromptSet:
    """M trainable sequences of K tokens followed by a frozen context.

    ``tokens`` has shape (M * K, token_dim); ``context`` has shape
    (context_len, token_dim) and is never watched.
    """

    tokens: object
    context: np.ndarray
    M: int
    K: int

    # ``context`` may also be (M, context_len, token_dim) to give each
    # sequence its own frozen suffix.

    def __post_init__(self):
        if self.M < 1 or self.K < 1:
            raise InputError(f"need M >= 1 and K >= 1, got M={self.M}, K={self.K}")
        shape = as_tensor(self.tokens).shape
        if shape[0] != self.M * self.K:
            raise InputError(f"tokens have {shape[0]} rows, expected M*K = {self.M * self.K}")


def encode_text_prompts(tp, encoder):
    """Embed each of the M sequences into one row of an (M x d) tensor."""
    tokens = as_tensor(tp.tokens)
    width = tokens.shape[1]
    if encoder.in_dim != width:
        raise ConfigError(f"text encoder expects tokens of width {encoder.in_dim}, prompts have {width}")
    seqs = tokens.reshape(tp.M, tp.K, width)
    ctx = np.asarray(tp.context, dtype=np.float64)
    if ctx.size:
        if ctx.ndim == 2:
            ctx = np.broadcast_to(ctx, (tp.M,) + ctx.shape)
        seqs = concat([seqs, Tensor(np.ascontiguousarray(ctx))], axis=1)
    return encoder(seqs)
