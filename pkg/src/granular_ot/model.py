"""The full slide model: dual-granularity prompt pooling aligned to text prompts by OT.

Parameters live in two flat dicts of named arrays.  ``params`` holds
everything the few-shot stage trains:

* ``pv.{c}.{mag}``   visual prompts, (N_p, d)
* ``tok.{c}.{mag}``  text prompt tokens, (M * K, token_dim)
* ``gat.{mag}.{theta_s|theta_t|a_s|a_t}``

``frozen`` holds the per-class context tokens (``ctx.{c}``), the text stub
encoder (``text_stub.W``) and, in adaptor mode, both adaptors
(``adaptor.img.*``, ``adaptor.txt.*``).
"""

from dataclasses import dataclass, replace

import numpy as np

from .adaptor import StubEncoder, TextEncoder, apply_adaptor
from .autodiff import Tensor, concat
from .errors import ConfigError, InputError
from .gat import GatParams, gat_forward
from .graph import build_grid_graph, build_knn_graph
from .ot import SinkhornConfig, cost_matrix, ot_distance, solve
from .prompts import MAGNIFICATIONS, FusionConfig, TextPromptSet, encode_text_prompts, fuse, group_prompting, patch_prompting


@dataclass(frozen=True)
class ModelConfig:
    classes: int = 2
    d: int = 48
    M: int = 4
    K: int = 16
    N_p: int = 16
    context_len: int = 32
    token_dim: int = 16
    alpha: float = 0.2
    sinkhorn: SinkhornConfig = SinkhornConfig()
    distance: str = "ot"
    graph: str = "grid"
    knn_k: int = 4
    mag_weights: tuple = (1.0, 1.0)
    gat_slope: float = 0.2

    def __post_init__(self):
        if self.distance not in ("ot", "cosine"):
            raise ConfigError(f"distance must be 'ot' or 'cosine', got {self.distance!r}")
        if self.graph not in ("grid", "knn"):
            raise ConfigError(f"graph must be 'grid' or 'knn', got {self.graph!r}")
        FusionConfig(self.alpha)


class SlideModel:
    """Parameters plus the frozen encoders needed to score one slide."""

    def __init__(self, cfg, params, frozen):
        self.cfg = cfg
        self.params = params
        self.frozen = frozen
        stub = StubEncoder.__new__(StubEncoder)
        stub.W = frozen["text_stub.W"]
        stub.out_dim, stub.in_dim = stub.W.shape
        txt = _prefixed(frozen, "adaptor.txt.")
        self.text_encoder = TextEncoder(stub, txt or None)
        self.image_adaptor = _prefixed(frozen, "adaptor.img.") or None
        if self.text_encoder.out_dim != cfg.d:
            raise ConfigError(f"text encoder width {self.text_encoder.out_dim} differs from feature width {cfg.d}")

    @classmethod
    def init(cls, cfg, rng, encoder_seed=0, adaptors=None, symmetric=False):
        """Fresh model.

        ``adaptors`` is an optional (image_adaptor, text_adaptor) pair of
        parameter dicts; when given, the text stub outputs the adaptor input
        width.  ``symmetric`` copies class 0's prompts and context to every
        class.
        """
        d = cfg.d
        bound = 1.0 / np.sqrt(d)
        frozen = {}
        if adaptors is not None:
            img, txt = adaptors
            stub_out = txt["W1"].shape[1]
            frozen.update({f"adaptor.img.{k}": np.array(v) for k, v in img.items()})
            frozen.update({f"adaptor.txt.{k}": np.array(v) for k, v in txt.items()})
        else:
            stub_out = d
        frozen["text_stub.W"] = StubEncoder(cfg.token_dim, stub_out, seed=[encoder_seed, 7]).W
        ctx_rng = np.random.default_rng([encoder_seed, 11])
        params = {}
        for c in range(cfg.classes):
            src = 0 if symmetric else c
            frozen[f"ctx.{c}"] = frozen[f"ctx.{src}"].copy() if src != c else ctx_rng.normal(size=(cfg.context_len, cfg.token_dim))
            for mag in MAGNIFICATIONS:
                if src != c:
                    params[f"pv.{c}.{mag}"] = params[f"pv.{src}.{mag}"].copy()
                    params[f"tok.{c}.{mag}"] = params[f"tok.{src}.{mag}"].copy()
                else:
                    params[f"pv.{c}.{mag}"] = rng.uniform(-bound, bound, (cfg.N_p, d))
                    params[f"tok.{c}.{mag}"] = rng.normal(size=(cfg.M * cfg.K, cfg.token_dim))
        for mag in MAGNIFICATIONS:
            for k, v in GatParams.init(d, rng, cfg.gat_slope).arrays().items():
                params[f"gat.{mag}.{k}"] = v
        return cls(cfg, params, frozen)

    def copy(self):
        return SlideModel(self.cfg, {k: v.copy() for k, v in self.params.items()}, dict(self.frozen))

    def with_config(self, **changes):
        return SlideModel(replace(self.cfg, **changes), self.params, self.frozen)

    def prepare(self, bag, cache=None):
        """Frozen per-slide inputs: adapted features and neighbour tables."""
        out = {}
        for mag in MAGNIFICATIONS:
            level = getattr(bag, mag)
            H = level.features
            if self.image_adaptor is not None:
                H = apply_adaptor(H, self.image_adaptor).data
            if H.shape[1] != self.cfg.d:
                raise InputError(f"{mag} features have width {H.shape[1]}, model expects {self.cfg.d}")
            out[mag] = (H, self._table(level.coords, cache))
        return out

    def _table(self, coords, cache):
        key = (self.cfg.graph, self.cfg.knn_k, coords.shape, coords.tobytes())
        if cache is not None and key in cache:
            return cache[key]
        if self.cfg.graph == "grid":
            g = build_grid_graph(coords)
        else:
            g = build_knn_graph(coords, self.cfg.knn_k)
        entry = (g, g.neighbor_table())
        if cache is not None:
            cache[key] = entry
        return entry


def _prefixed(d, prefix):
    return {k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix)}


def forward_slide(model, prepared, P=None, plans=None, patch_only=False):
    """Per-class, per-magnification distances as a (C, 2) tensor.

    ``P`` maps parameter names to tensors (tape-watched for training); it
    defaults to constant views of ``model.params``.  ``plans`` optionally
    fixes the transport plans, keyed by (class, magnification); the plans
    actually used are returned alongside the distances.  ``patch_only``
    skips the graph branch entirely.
    """
    cfg = model.cfg
    if P is None:
        P = {k: Tensor(v) for k, v in model.params.items()}
    costs = []
    for mag in MAGNIFICATIONS:
        H, graph_entry = prepared[mag]
        p_v = visual_prompts(P, H, graph_entry, mag, cfg, patch_only).reshape(cfg.classes, cfg.N_p, cfg.d)
        p_t = text_embeddings(model, P, mag).reshape(cfg.classes, cfg.M, cfg.d)
        costs.append(cost_matrix(p_t, p_v))
    # rows ordered (mag, class)
    C = concat(costs, axis=0)
    keys = [(c, mag) for mag in MAGNIFICATIONS for c in range(cfg.classes)]
    used = {}
    if cfg.distance == "cosine":
        dist = C.mean(axis=(1, 2))
    else:
        if plans is not None:
            batch = [plans[k] for k in keys]
        else:
            batch = solve(C, cfg=cfg.sinkhorn)
        used = dict(zip(keys, batch))
        dist = ot_distance(batch, C)
    return dist.reshape(len(MAGNIFICATIONS), cfg.classes).T, used


def visual_prompts(P, H, graph_entry, mag, cfg, patch_only=False):
    """Fused prompt-pooled slide features of every class, stacked to (C * N_p, d).

    Pooling is row-wise in the prompts, so stacking the class prompts and
    pooling once equals pooling each class separately.
    """
    pv = concat([P[f"pv.{c}.{mag}"] for c in range(cfg.classes)], axis=0)
    p_patch = patch_prompting(pv, H)
    if patch_only:
        return p_patch
    graph, table = graph_entry
    gat = GatParams(*(P[f"gat.{mag}.{k}"] for k in ("theta_s", "theta_t", "a_s", "a_t")), slope=cfg.gat_slope)
    H_gr = gat_forward(graph, H, gat, table)
    p_group = group_prompting(pv, H_gr)
    return fuse(p_patch, p_group, FusionConfig(cfg.alpha))


def text_embeddings(model, P, mag):
    """Text prompt embeddings of every class, stacked to (C * M, d)."""
    cfg = model.cfg
    tokens = concat([P[f"tok.{c}.{mag}"] for c in range(cfg.classes)], axis=0)
    context = np.concatenate([np.broadcast_to(model.frozen[f"ctx.{c}"], (cfg.M,) + model.frozen[f"ctx.{c}"].shape) for c in range(cfg.classes)])
    tp = TextPromptSet(tokens, context, cfg.classes * cfg.M, cfg.K)
    return encode_text_prompts(tp, model.text_encoder)
