"""Frozen stub encoders, trainable MLP adaptors and contrastive alignment.

The stub encoders stand in for large frozen image/text backbones: a seeded
random linear map followed by tanh.  Two small MLP adaptors project both
modalities into a shared width and are trained with an image-anchored
InfoNCE objective while the encoders stay fixed.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradTape, Tensor, as_tensor, l2_normalize_rows, log, matmul, softmax_rows, tanh
from .errors import DivergenceError, InputError
from .optim import Adam


class StubEncoder:
    """Frozen ``x -> tanh(x W^T)`` with W ~ N(0, 1/in_dim) drawn from ``seed``."""

    def __init__(self, in_dim, out_dim, seed):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.W = rng.normal(0.0, 1.0 / np.sqrt(in_dim), (out_dim, in_dim))

    def __call__(self, x):
        if isinstance(x, Tensor):
            return tanh(matmul(x, Tensor(self.W.T)))
        return np.tanh(np.asarray(x, dtype=np.float64) @ self.W.T)


def init_adaptor(in_dim, out_dim, rng, hidden=None):
    """One hidden tanh layer of width ``hidden`` (default 2 * out_dim)."""
    hidden = 2 * out_dim if hidden is None else hidden
    b1 = 1.0 / np.sqrt(in_dim)
    b2 = 1.0 / np.sqrt(hidden)
    return {
        "W1": rng.uniform(-b1, b1, (hidden, in_dim)),
        "b1": np.zeros((1, hidden)),
        "W2": rng.uniform(-b2, b2, (out_dim, hidden)),
        "b2": np.zeros((1, out_dim)),
    }


def apply_adaptor(x, p):
    """MLP forward; ``p`` values may be arrays (frozen) or tape tensors."""
    x = as_tensor(x)
    h = tanh(matmul(x, as_tensor(p["W1"]).T) + p["b1"])
    return matmul(h, as_tensor(p["W2"]).T) + p["b2"]


class TextEncoder:
    """Mean-pool a batch of token sequences, then stub encoder, then optional adaptor.

    Input has shape (M, L, token_dim); output (M, out_dim).
    """

    def __init__(self, stub, adaptor=None):
        self.stub = stub
        self.adaptor = adaptor
        self.in_dim = stub.in_dim
        self.out_dim = stub.out_dim if adaptor is None else adaptor["W2"].shape[0]

    def __call__(self, seqs):
        seqs = as_tensor(seqs)
        h = self.stub(seqs.mean(axis=1))
        if self.adaptor is not None:
            h = apply_adaptor(h, self.adaptor)
        return h


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.07
    batch_size: int = 64

    def __post_init__(self):
        if not self.tau > 0:
            raise InputError(f"temperature must be positive, got {self.tau}")
        if self.batch_size < 2:
            raise InputError(f"batch size must be >= 2, got {self.batch_size}")


def contrastive_loss(image_emb, text_emb, cfg=ContrastiveConfig()):
    """Mean over the batch of ``-log softmax_j(cos(x_i, t_j) / tau)[i]``."""
    x, t = as_tensor(image_emb), as_tensor(text_emb)
    if x.shape != t.shape or x.ndim != 2:
        raise InputError(f"paired batches must share shape, got {x.shape} and {t.shape}")
    for label, m in (("image", x), ("text", t)):
        zero = np.flatnonzero(np.linalg.norm(m.data, axis=1) == 0)
        if zero.size:
            raise InputError(f"{label} embedding row {int(zero[0])} has zero norm")
    B = x.shape[0]
    logits = matmul(l2_normalize_rows(x), l2_normalize_rows(t).T) * (1.0 / cfg.tau)
    probs = softmax_rows(logits)
    diag = np.arange(B)
    return -log(probs[diag, diag]).mean()


def make_rotation_pairs(n, raw_dim, seed):
    """Raw image vectors and their text partners under one fixed rotation."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(raw_dim, raw_dim)))
    q = q * np.sign(np.diag(r))
    img = rng.normal(size=(n, raw_dim))
    return img, img @ q.T


@dataclass
class PretrainResult:
    image_adaptor: dict
    text_adaptor: dict
    losses: list = field(default_factory=list)


def pretrain_adaptors(
    img_raw,
    txt_raw,
    image_encoder,
    text_encoder,
    cfg=ContrastiveConfig(),
    epochs=50,
    seed=0,
    lr=1e-3,
    d=32,
):
    """Fit both adaptors by Adam on the contrastive loss; encoders stay frozen.

    Each epoch shuffles the pairs and walks full batches of
    ``cfg.batch_size``.  ``losses`` holds the mean batch loss per epoch.
    """
    img_raw = np.asarray(img_raw, dtype=np.float64)
    txt_raw = np.asarray(txt_raw, dtype=np.float64)
    n = len(img_raw)
    if len(txt_raw) != n:
        raise InputError("image and text pair counts differ")
    if n < cfg.batch_size:
        raise InputError(f"need at least {cfg.batch_size} pairs, got {n}")
    rng = np.random.default_rng(seed)
    feats_i = image_encoder(img_raw)
    feats_t = text_encoder(txt_raw)
    params = {}
    for side, p in (
        ("img", init_adaptor(image_encoder.out_dim, d, rng)),
        ("txt", init_adaptor(text_encoder.out_dim, d, rng)),
    ):
        for k, v in p.items():
            params[f"{side}.{k}"] = v
    opt = Adam(params, lr=lr)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            tape = GradTape()
            w = {k: tape.watch(v, name=k) for k, v in params.items()}
            loss = contrastive_loss(
                apply_adaptor(feats_i[idx], _side(w, "img")),
                apply_adaptor(feats_t[idx], _side(w, "txt")),
                cfg,
            )
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"contrastive loss became {value} at epoch {epoch}")
            grads = tape.backward(loss)
            opt.step({k: grads[t] for k, t in w.items()})
            batch_losses.append(value)
        losses.append(float(np.mean(batch_losses)))
    return PretrainResult(_side(params, "img"), _side(params, "txt"), losses)


def _side(d, prefix):
    return {k.split(".", 1)[1]: v for k, v in d.items() if k.startswith(prefix + ".")}


def retrieval_top1(img_emb, txt_emb, batch_size=64):
    """Fraction of images whose own caption has the highest cosine within its batch."""
    x = np.asarray(img_emb, dtype=np.float64)
    t = np.asarray(txt_emb, dtype=np.float64)
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    t = t / np.linalg.norm(t, axis=1, keepdims=True)
    hits = total = 0
    for s in range(0, len(x) - batch_size + 1, batch_size):
        sim = x[s : s + batch_size] @ t[s : s + batch_size].T
        hits += int((sim.argmax(axis=1) == np.arange(batch_size)).sum())
        total += batch_size
    return hits / total
