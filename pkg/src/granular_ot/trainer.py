"""Few-shot training, fold protocol, evaluation and the checkpoint container.

Checkpoint layout: ``b"CKPT1"`` followed by named tensor records until end
of file, each ``u32 name length, name bytes, TNS1 tensor``.  The record
``meta.json`` carries the UTF-8 bytes of a JSON header (config snapshot,
class count, feature width, fold, best epoch) as a 1-D tensor of byte
values.  Frozen tensors are stored under a ``frozen/`` prefix.
"""

from dataclasses import asdict, dataclass, field
import json
import struct

import numpy as np

from .adaptor import ContrastiveConfig, StubEncoder, make_rotation_pairs, pretrain_adaptors
from .autodiff import GradTape
from .classifier import FoldMetrics, class_probabilities, compute_metrics, cross_entropy_loss, macro_f1
from .errors import ConfigError, DataError, DivergenceError, FormatError, InputError
from .model import ModelConfig, SlideModel, forward_slide
from .ot import SinkhornConfig
from .optim import Adam
from .synthetic import read_dataset, read_manifest
from .tensor_io import read_u32, tensor_from_bytes, tensor_to_bytes

CKPT_MAGIC = b"CKPT1"
ADAPTOR_WIDTH = 32
TEXT_STUB_WIDTH = 24


@dataclass(frozen=True)
class TrainConfig:
    shots: int = 16
    epochs: int = 200
    lr: float = 9e-6
    weight_decay: float = 1e-5
    batch_size: int = 1
    alpha: float = 0.2
    M: int = 4
    N_p: int = 16
    K: int = 16
    context_len: int = 32
    token_dim: int = 16
    sinkhorn_lambda: float = 0.1
    sinkhorn_iterations: int = 100
    uot_rho1: float = 0.0
    uot_rho2: float = 0.0
    distance: str = "ot"
    seed: int = 0
    folds: int = 5
    feature_mode: str = "raw"
    adaptor_epochs: int = 50
    adaptor_pairs: int = 4096
    graph: str = "grid"
    knn_k: int = 4
    val_fraction: float = 0.2
    weight_low: float = 1.0
    weight_high: float = 1.0

    def __post_init__(self):
        if self.shots < 1 or self.epochs < 0 or self.folds < 1 or self.batch_size < 1:
            raise ConfigError("shots, folds and batch_size must be >= 1 and epochs >= 0")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be nonnegative")
        if self.feature_mode not in ("raw", "adaptor"):
            raise ConfigError(f"feature_mode must be 'raw' or 'adaptor', got {self.feature_mode!r}")
        if (self.uot_rho1 > 0) != (self.uot_rho2 > 0):
            raise ConfigError("set both uot_rho1 and uot_rho2 (> 0) or neither")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        self.model_config(2, 1)

    def sinkhorn(self):
        uot = (self.uot_rho1, self.uot_rho2) if self.uot_rho1 > 0 else None
        try:
            return SinkhornConfig(self.sinkhorn_lambda, self.sinkhorn_iterations, uot)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model_config(self, classes, d):
        return ModelConfig(
            classes=classes,
            d=d,
            M=self.M,
            K=self.K,
            N_p=self.N_p,
            context_len=self.context_len,
            token_dim=self.token_dim,
            alpha=self.alpha,
            sinkhorn=self.sinkhorn(),
            distance=self.distance,
            graph=self.graph,
            knn_k=self.knn_k,
            mag_weights=(self.weight_low, self.weight_high),
        )


@dataclass
class Checkpoint:
    config: TrainConfig
    classes: int
    d_v: int
    params: dict
    frozen: dict
    fold: int = 0
    best_epoch: int = 0

    def model(self):
        d = ADAPTOR_WIDTH if self.config.feature_mode == "adaptor" else self.d_v
        return SlideModel(self.config.model_config(self.classes, d), self.params, self.frozen)


@dataclass
class FoldResult:
    checkpoint: Checkpoint
    test: object
    trajectory: list = field(default_factory=list)

    def trajectory_csv(self):
        lines = ["epoch,split,loss,f1"]
        lines += [f"{e},{s},{loss!r},{f1!r}" for e, s, loss, f1 in self.trajectory]
        return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    folds: list
    metrics: FoldMetrics


# --- model assembly ---------------------------------------------------------


def _adaptors(cfg, d_v):
    raw = cfg.token_dim
    img, txt = make_rotation_pairs(cfg.adaptor_pairs, raw, seed=[cfg.seed, 21])
    image_stub = StubEncoder(raw, d_v, seed=[cfg.seed, 5])
    text_stub = StubEncoder(raw, TEXT_STUB_WIDTH, seed=[cfg.seed, 7])
    res = pretrain_adaptors(
        img, txt, image_stub, text_stub, ContrastiveConfig(), epochs=cfg.adaptor_epochs, seed=cfg.seed, d=ADAPTOR_WIDTH
    )
    return res.image_adaptor, res.text_adaptor


def build_model(cfg, classes, d_v, fold=0, adaptors=None, symmetric=False):
    """Fresh model for one fold.  In adaptor mode ``adaptors`` may be passed
    in to avoid re-running the contrastive stage."""
    if cfg.feature_mode == "adaptor":
        adaptors = adaptors if adaptors is not None else _adaptors(cfg, d_v)
        d = ADAPTOR_WIDTH
    else:
        adaptors, d = None, d_v
    rng = np.random.default_rng([cfg.seed, fold, 1])
    return SlideModel.init(cfg.model_config(classes, d), rng, encoder_seed=cfg.seed, adaptors=adaptors, symmetric=symmetric)


def slide_loss(model, prepared, label, P=None, plans=None):
    D, used = forward_slide(model, prepared, P, plans)
    probs = class_probabilities(D, model.cfg.mag_weights)
    return cross_entropy_loss(probs, label), probs, used


def predict(model, prepared):
    """Class-probability rows and mean loss for a list of (prepared, label)."""
    scores, losses = [], []
    for prep, label in prepared:
        loss, probs, _ = slide_loss(model, prep, label)
        scores.append(probs.data.reshape(-1))
        losses.append(loss.item())
    return np.array(scores), float(np.mean(losses))


# --- fold protocol ----------------------------------------------------------


def split_fold(bags, cfg, fold, classes):
    """Shots, validation and test bags for one fold.

    Validation takes ``val_fraction`` of each class's training pool; shots
    are drawn from the rest.  Both depend on ``(seed, fold)``.
    """
    rng = np.random.default_rng([cfg.seed, fold, 0])
    shots, val = [], []
    for c in range(classes):
        pool = [b for b in bags if b.split == "train" and b.label == c]
        order = rng.permutation(len(pool))
        n_val = max(1, int(round(cfg.val_fraction * len(pool))))
        if len(pool) - n_val < cfg.shots:
            raise DataError(
                f"class {c} has {len(pool)} training slides; need {cfg.shots} shots plus {n_val} for validation"
            )
        val += [pool[i] for i in order[:n_val]]
        shots += [pool[i] for i in order[n_val : n_val + cfg.shots]]
    test = [b for b in bags if b.split == "test"]
    if not test:
        raise DataError("dataset has no test slides")
    return shots, val, test


def _diagnose(params, grads, epoch, slide_id, reason):
    bad = [k for k, v in params.items() if not np.all(np.isfinite(v))]
    gnorm = sorted(((float(np.linalg.norm(g)), k) for k, g in grads.items()), reverse=True)[:3]
    top = ", ".join(f"{k}={n:.3g}" for n, k in gnorm) or "n/a"
    largest = max(params, key=lambda k: float(np.nanmax(np.abs(params[k]))))
    return DivergenceError(
        f"{reason} at epoch {epoch} on slide {slide_id}; non-finite parameters: {bad or 'none'}; "
        f"largest parameter: {largest}; largest gradient norms: {top}"
    )


def train_fold(model, shots, val, test, cfg, fold=0, d_v=None):
    """Adam over shuffled shots; keep the epoch with best validation F1.

    Ties in F1 go to the lower validation loss, then to the earlier epoch.
    """
    cache = {}
    prep_shots = [(model.prepare(b, cache), b.label, b.slide_id) for b in shots]
    prep_val = [(model.prepare(b, cache), b.label) for b in val]
    prep_test = [(model.prepare(b, cache), b.label) for b in test]
    rng = np.random.default_rng([cfg.seed, fold, 2])
    opt = Adam(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    best = None
    trajectory = []
    last_grads = {}
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(prep_shots))
        epoch_losses, preds, labels = [], [], []
        for start in range(0, len(order), cfg.batch_size):
            acc = {}
            batch = order[start : start + cfg.batch_size]
            for i in batch:
                prep, label, sid = prep_shots[i]
                tape = GradTape()
                P = {k: tape.watch(v, name=k) for k, v in model.params.items()}
                try:
                    with np.errstate(all="ignore"):
                        loss, probs, _ = slide_loss(model, prep, label, P)
                        grads = tape.backward(loss)
                except (DivergenceError, InputError) as exc:
                    raise _diagnose(model.params, last_grads, epoch, sid, str(exc)) from None
                value = loss.item()
                if not np.isfinite(value):
                    raise _diagnose(model.params, last_grads, epoch, sid, f"loss became {value}")
                for k, t in P.items():
                    acc[k] = grads[t] if k not in acc else acc[k] + grads[t]
                epoch_losses.append(value)
                preds.append(int(np.argmax(probs.data)))
                labels.append(label)
            last_grads = {k: g / len(batch) for k, g in acc.items()}
            opt.step(last_grads)
        scores, val_loss = predict(model, prep_val)
        val_labels = [lab for _, lab in prep_val]
        val_f1 = macro_f1(scores.argmax(axis=1), val_labels)
        trajectory.append((epoch, "train", float(np.mean(epoch_losses)), macro_f1(preds, labels)))
        trajectory.append((epoch, "val", val_loss, val_f1))
        if best is None or (val_f1, -val_loss) > (best[0], -best[1]):
            best = (val_f1, val_loss, epoch, {k: v.copy() for k, v in model.params.items()})
    if best is not None:
        model.params.update(best[3])
    best_epoch = best[2] if best is not None else -1
    scores, _ = predict(model, prep_test)
    report = compute_metrics(scores, [lab for _, lab in prep_test])
    ckpt = Checkpoint(
        config=cfg,
        classes=model.cfg.classes,
        d_v=d_v if d_v is not None else model.cfg.d,
        params={k: v.copy() for k, v in model.params.items()},
        frozen=dict(model.frozen),
        fold=fold,
        best_epoch=best_epoch,
    )
    return FoldResult(ckpt, report, trajectory)


def _load_bags(data):
    if isinstance(data, str):
        manifest = read_manifest(data)
        return read_dataset(data), int(manifest["C"]), int(manifest["d_v"])
    bags = list(data)
    return bags, 1 + max(b.label for b in bags), int(bags[0].low.features.shape[1])


def train(cfg, data):
    """Run ``cfg.folds`` independent folds; ``data`` is a dataset dir or a list of bags."""
    bags, classes, d_v = _load_bags(data)
    adaptors = _adaptors(cfg, d_v) if cfg.feature_mode == "adaptor" else None
    folds = []
    metrics = FoldMetrics()
    for fold in range(cfg.folds):
        shots, val, test = split_fold(bags, cfg, fold, classes)
        model = build_model(cfg, classes, d_v, fold, adaptors)
        res = train_fold(model, shots, val, test, cfg, fold, d_v)
        folds.append(res)
        metrics.add(res.test)
    return TrainResult(folds, metrics)


def evaluate(checkpoint, data):
    """Metrics of a checkpoint on the test split of ``data``."""
    bags, classes, d_v = _load_bags(data)
    if d_v != checkpoint.d_v or classes != checkpoint.classes:
        raise DataError(
            f"checkpoint expects (classes={checkpoint.classes}, d_v={checkpoint.d_v}), "
            f"dataset has (classes={classes}, d_v={d_v})"
        )
    test = [b for b in bags if b.split == "test"]
    if not test:
        raise DataError("dataset has no test slides")
    model = checkpoint.model()
    cache = {}
    scores, _ = predict(model, [(model.prepare(b, cache), b.label) for b in test])
    return compute_metrics(scores, [b.label for b in test])


# --- checkpoint container ---------------------------------------------------

META_RECORD = "meta.json"


def checkpoint_to_bytes(ckpt):
    header = {
        "config": asdict(ckpt.config),
        "classes": ckpt.classes,
        "d_v": ckpt.d_v,
        "fold": ckpt.fold,
        "best_epoch": ckpt.best_epoch,
    }
    blob = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    records = [(META_RECORD, blob)]
    records += [(name, ckpt.params[name]) for name in sorted(ckpt.params)]
    records += [("frozen/" + name, ckpt.frozen[name]) for name in sorted(ckpt.frozen)]
    out = [CKPT_MAGIC]
    for name, array in records:
        key = name.encode()
        out += [struct.pack("<I", len(key)), key, tensor_to_bytes(array)]
    return b"".join(out)


def checkpoint_from_bytes(buf):
    if len(buf) < len(CKPT_MAGIC):
        raise FormatError("truncated checkpoint magic", 0)
    if buf[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {bytes(buf[:5])!r}", 0)
    pos = len(CKPT_MAGIC)
    records = {}
    while pos < len(buf):
        klen, p2 = read_u32(buf, pos, "record name length")
        if p2 + klen > len(buf):
            raise FormatError("truncated record name", p2)
        try:
            name = buf[p2 : p2 + klen].decode()
        except UnicodeDecodeError:
            raise FormatError("record name is not UTF-8", p2) from None
        records[name], pos = tensor_from_bytes(buf, p2 + klen)
    if META_RECORD not in records:
        raise FormatError(f"checkpoint has no {META_RECORD} record", len(buf))
    try:
        header = json.loads(records.pop(META_RECORD).astype(np.uint8).tobytes().decode())
        cfg = TrainConfig(**header["config"])
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}", len(CKPT_MAGIC)) from None
    params = {k: v for k, v in records.items() if not k.startswith("frozen/")}
    frozen = {k[len("frozen/") :]: v for k, v in records.items() if k.startswith("frozen/")}
    return Checkpoint(cfg, header["classes"], header["d_v"], params, frozen, header["fold"], header["best_epoch"])


def save_checkpoint(ckpt, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(ckpt))


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return checkpoint_from_bytes(buf)
