"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`GradTape` owns an append-only list of nodes.  Parameters are
registered with :meth:`GradTape.watch`; every operation touching a watched
tensor appends one node holding its parents and a closure that maps the
output gradient to parent gradients.  Append order is a valid topological
order, so the backward sweep is a single reverse pass.

Tensors that are not on a tape behave as constants, which makes the same
model code usable for plain evaluation (finite differences, inference).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import DivergenceError, InputError

__all__ = [
    "Tensor",
    "GradTape",
    "as_tensor",
    "matmul",
    "softmax_rows",
    "layer_norm",
    "leaky_relu",
    "exp",
    "log",
    "tanh",
    "sqrt",
    "clip",
    "concat",
    "gather_rows",
    "neighbor_sum",
    "l2_normalize_rows",
    "backward",
    "check_gradients",
    "GradCheckReport",
]


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward


class GradTape:
    """Single-writer record of one differentiable computation."""

    def __init__(self):
        self.nodes = []
        self.roots = []

    def watch(self, value, name=None):
        """Register ``value`` as a trainable root and return its tensor."""
        data = np.array(value, dtype=np.float64)
        t = Tensor(data, tape=self, node=len(self.nodes))
        t.name = name
        self.nodes.append(_Node("param", (), None))
        self.roots.append(t)
        return t

    def _record(self, op, data, inputs, fn):
        parents = tuple(x.node if x.tape is self else None for x in inputs)
        out = Tensor(data, tape=self, node=len(self.nodes))
        self.nodes.append(_Node(op, parents, fn))
        return out

    def backward(self, loss):
        return backward(self, loss)

    def __len__(self):
        return len(self.nodes)


class Tensor:
    """A float64 array, optionally bound to a tape node."""

    __slots__ = ("data", "tape", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, tape=None, node=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node
        self.name = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def item(self):
        if self.data.size != 1:
            raise InputError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = "" if self.tape is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            n = int(np.prod([self.data.shape[a] for a in np.atleast_1d(axis)]))
        return tsum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise InputError("operands are recorded on different tapes")
            tape = x.tape
    return tape


def _emit(op, data, inputs, fn):
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    return tape._record(op, data, inputs, fn)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise arithmetic -------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def power(a, p):
    a = as_tensor(a)
    ad = a.data
    p = float(p)
    return _emit("pow", ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    ad = a.data
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _emit("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes only where the value was inside."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _emit("clip", np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def leaky_relu(x, slope=0.2):
    x = as_tensor(x)
    if not 0.0 < slope < 1.0:
        raise InputError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    xd = x.data
    pos = xd >= 0
    out = np.where(pos, xd, slope * xd)
    return _emit("leaky_relu", out, (x,), lambda g: (np.where(pos, g, slope * g),))


# --- shape and reduction ----------------------------------------------------


def matmul(a, b):
    """Matrix product; 3-D operands are treated as stacks of matrices."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise InputError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    at, bt = np.swapaxes(ad, -1, -2), np.swapaxes(bd, -1, -2)
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bt, at @ g))


def transpose(a):
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        return a
    return _emit("transpose", np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), fn)


def _is_basic(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) for p in parts)


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic(idx)

    def fn(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _emit("getitem", np.asarray(a.data[idx]), (a,), fn)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def _selector(index, n_src):
    """Sparse (len(index), n_src) matrix with a one in row r, column index[r]."""
    rows = np.arange(index.size)
    return sparse.csr_matrix((np.ones(index.size), (rows, index.reshape(-1))), shape=(index.size, n_src))


def gather_rows(x, index):
    """``x[index]`` for an integer array ``index`` of any shape (rows of 2-D ``x``)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    n, d = x.shape
    out = x.data[index.reshape(-1)].reshape(index.shape + (d,))
    if x.tape is None:
        return Tensor(out)
    sel = _selector(index, n)
    return _emit("gather_rows", out, (x,), lambda g: (np.asarray(sel.T @ g.reshape(-1, d)),))


def neighbor_sum(weights, index, values):
    """Row i of the result is ``sum_k weights[i, k] * values[index[i, k]]``."""
    w, v = as_tensor(weights), as_tensor(values)
    index = np.asarray(index, dtype=np.int64)
    n_out, width = index.shape
    A = sparse.csr_matrix(
        (w.data.reshape(-1), index.reshape(-1), np.arange(0, n_out * width + 1, width)),
        shape=(n_out, v.shape[0]),
    )
    vd = v.data

    def fn(g):
        gw = np.einsum("id,ikd->ik", g, vd[index])
        return gw, np.asarray(A.T @ g)

    return _emit("neighbor_sum", np.asarray(A @ vd), (w, v), fn)


# --- fused row-wise operators ----------------------------------------------


def softmax_rows(x, mask=None):
    """Row-wise softmax with max subtraction.

    ``mask`` (boolean, same shape) excludes entries; excluded entries get
    probability exactly zero.  Every row must keep at least one entry.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", y, (x,), fn)


def layer_norm(x, eps=1e-5):
    """Normalize each row to zero mean and unit variance, no affine part."""
    x = as_tensor(x)
    xd = x.data
    if xd.shape[-1] < 1:
        raise InputError("layer_norm needs at least one column")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _emit("layer_norm", y, (x,), fn)


def l2_normalize_rows(x):
    x = as_tensor(x)
    return x / sqrt((x * x).sum(axis=-1, keepdims=True))


# --- reverse sweep ----------------------------------------------------------


def backward(tape, loss):
    """Gradients of scalar ``loss`` with respect to every watched root.

    Returns a dict keyed by the root tensors.  Roots the loss does not depend
    on get a zero array.
    """
    if not isinstance(loss, Tensor) or loss.tape is not tape:
        raise InputError("loss is not recorded on this tape")
    if loss.data.size != 1:
        raise InputError(f"loss must be a scalar, got shape {loss.shape}")
    grads = [None] * (loss.node + 1)
    grads[loss.node] = np.ones_like(loss.data)
    nodes = tape.nodes
    for i in range(loss.node, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.backward is None:
            continue
        for pid, pg in zip(node.parents, node.backward(g)):
            if pid is None:
                continue
            grads[pid] = pg if grads[pid] is None else grads[pid] + pg
    out = {}
    for r in tape.roots:
        g = grads[r.node] if r.node < len(grads) else None
        out[r] = np.zeros_like(r.data) if g is None else np.asarray(g, dtype=np.float64).reshape(r.shape)
    return out


@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    worst_index: dict = field(default_factory=dict)
    tol: float = 1e-4
    passed: bool = True

    def __str__(self):
        lines = [f"gradient check {'PASS' if self.passed else 'FAIL'} (tol={self.tol:g})"]
        for k, v in self.max_rel_error.items():
            lines.append(f"  {k}: max rel err {v:.3e} at {self.worst_index[k]}")
        return "\n".join(lines)


def check_gradients(f, params, step=1e-4, tol=1e-4, floor=1e-6):
    """Compare tape gradients of ``f`` against central differences.

    ``f`` maps a dict of tensors to a scalar tensor and must be
    deterministic.  The error for entry i is
    ``|g_tape - g_fd| / max(|g_tape|, |g_fd|, floor)``; ``floor`` keeps
    entries whose true gradient is at the finite-difference noise level from
    dominating the report.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = GradTape()
    watched = {k: tape.watch(v, name=k) for k, v in params.items()}
    grads = tape.backward(f(watched))

    report = GradCheckReport(tol=tol)
    for name, base in params.items():
        g_tape = grads[watched[name]]
        g_fd = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for sgn in (1.0, -1.0):
                pert = {k: v.copy() for k, v in params.items()}
                pert[name][idx] += sgn * step
                vals.append(f({k: Tensor(v) for k, v in pert.items()}).item())
            if not all(np.isfinite(vals)):
                raise DivergenceError(f"non-finite value while perturbing {name}{list(idx)}")
            g_fd[idx] = (vals[0] - vals[1]) / (2.0 * step)
        if not np.all(np.isfinite(g_tape)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(g_tape))[0])
            raise DivergenceError(f"non-finite tape gradient for {name}{list(bad)}")
        denom = np.maximum(np.maximum(np.abs(g_tape), np.abs(g_fd)), floor)
        err = np.abs(g_tape - g_fd) / denom
        worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
        report.worst_index[name] = tuple(int(i) for i in worst)
    report.passed = all(v <= tol for v in report.max_rel_error.values())
    return report
