"""Entropic optimal transport between two point clouds of embeddings.

The balanced solver runs a fixed number of Sinkhorn scaling rounds on the
Gibbs kernel ``K = exp(-C / lam)``; the unbalanced variant replaces the hard
marginal constraints with KL penalties, which turns each scaling update into
a damped power of the balanced one.

Transport plans are always plain arrays.  When the cost comes from tape
tensors, :func:`ot_distance` returns a tape tensor whose gradient flows
through the cost only.
"""

from dataclasses import dataclass
import itertools

import numpy as np

from .autodiff import Tensor, as_tensor, clip, l2_normalize_rows, matmul
from .errors import DivergenceError, InputError

DIV_FLOOR = 1e-300
EXACT_MAX_N = 7


@dataclass(frozen=True)
class SinkhornConfig:
    """Solver settings; ``uot`` holds (rho_rows, rho_cols) or None."""

    lam: float = 0.1
    iterations: int = 100
    uot: tuple = None

    def __post_init__(self):
        if not self.lam > 0:
            raise InputError(f"entropic regularization must be positive, got {self.lam}")
        if self.iterations < 1:
            raise InputError(f"iterations must be >= 1, got {self.iterations}")
        if self.uot is not None:
            r1, r2 = self.uot
            if not (r1 > 0 and r2 > 0):
                raise InputError(f"marginal penalties must be positive, got {self.uot}")


@dataclass
class TransportPlan:
    T: np.ndarray
    a: np.ndarray
    b: np.ndarray
    iterations_run: int
    marginal_violation: float

    @property
    def mass(self):
        return float(self.T.sum())


def uniform(n):
    return np.full(n, 1.0 / n)


def as_measure(weights, n, balanced=True):
    """Validate a weight vector of length ``n`` (None means uniform)."""
    if weights is None:
        return uniform(n)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (n,):
        raise InputError(f"measure has {w.size} weights, expected {n}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InputError("measure weights must be finite and nonnegative")
    if balanced and abs(w.sum() - 1.0) > 1e-12:
        raise InputError(f"measure weights sum to {w.sum()!r}, expected 1")
    return w


def cost_matrix(F, G):
    """Cosine cost ``1 - <f_i, g_j>`` between unit-normalized rows.

    Entries are clamped to [0, 2].  Works on tape tensors or arrays and
    returns a :class:`Tensor` either way.  Inputs of shape (..., M, d) and
    (..., N, d) give a stack of (M, N) costs.
    """
    F, G = as_tensor(F), as_tensor(G)
    if F.ndim < 2 or F.ndim != G.ndim or F.shape[:-2] != G.shape[:-2] or F.shape[-1] != G.shape[-1]:
        raise InputError(f"cost_matrix needs (M, d) and (N, d) inputs, got {F.shape} and {G.shape}")
    for label, X in (("F", F), ("G", G)):
        zero = np.argwhere(np.linalg.norm(X.data, axis=-1) == 0)
        if zero.size:
            raise InputError(f"{label} row {tuple(int(i) for i in zero[0])} has zero norm")
    sim = matmul(l2_normalize_rows(F), l2_normalize_rows(G).T)
    return clip(1.0 - sim, 0.0, 2.0)


def _as_cost(C):
    C = C.data if isinstance(C, Tensor) else np.asarray(C, dtype=np.float64)
    if C.ndim not in (2, 3):
        raise InputError(f"cost must be a matrix or a stack of matrices, got shape {C.shape}")
    return C


class _Guard:
    """Floors scaling denominators; a second floor event in one solve is fatal."""

    def __init__(self):
        self.hits = 0

    def __call__(self, num, den):
        if den.min() < DIV_FLOOR:
            self.hits += 1
            if self.hits > 1:
                raise DivergenceError(
                    "Sinkhorn scaling denominator underflowed repeatedly; "
                    "increase the entropic regularization lambda"
                )
            den = np.maximum(den, DIV_FLOOR)
        return num / den


def _scale(C, mu, nu, cfg, exponents=None):
    """Shared scaling loop over a stack of problems of shape (B, M, N)."""
    K = np.exp(-C / cfg.lam)
    KT = np.swapaxes(K, -1, -2)
    guard = _Guard()
    b = np.ones(nu.shape)
    for _ in range(cfg.iterations):
        a = guard(mu, (K @ b[..., None])[..., 0])
        if exponents is not None:
            a = a ** exponents[0]
        b = guard(nu, (KT @ a[..., None])[..., 0])
        if exponents is not None:
            b = b ** exponents[1]
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise DivergenceError("Sinkhorn scalings became non-finite; increase lambda")
    T = a[..., :, None] * K * b[..., None, :]
    viol = np.maximum(
        np.abs(T.sum(axis=-1) - mu).max(axis=-1),
        np.abs(T.sum(axis=-2) - nu).max(axis=-1),
    )
    return T, a, b, viol


def _measures(C, mu, nu, balanced):
    m, n = C.shape[-2:]
    return as_measure(mu, m, balanced), as_measure(nu, n, balanced)


def _plans(C, mu, nu, cfg, exponents):
    C = _as_cost(C)
    mu, nu = _measures(C, mu, nu, exponents is None)
    T, a, b, viol = _scale(C, mu, nu, cfg, exponents)
    if C.ndim == 2:
        return TransportPlan(T, a, b, cfg.iterations, float(viol))
    return [TransportPlan(T[i], a[i], b[i], cfg.iterations, float(viol[i])) for i in range(len(C))]


def sinkhorn(C, mu=None, nu=None, cfg=SinkhornConfig()):
    """Balanced entropic OT by alternating diagonal scaling.

    Runs exactly ``cfg.iterations`` rounds of ``a = mu / (K b)``,
    ``b = nu / (K^T a)`` with ``K = exp(-C / lam)``, starting from ``b = 1``.
    A (B, M, N) cost stack is solved in one batch and yields a list of
    plans sharing ``mu`` and ``nu``.
    """
    if cfg.uot is not None:
        raise InputError("sinkhorn() is the balanced solver; use unbalanced_sinkhorn for uot")
    return _plans(C, mu, nu, cfg, None)


def unbalanced_sinkhorn(C, mu=None, nu=None, cfg=SinkhornConfig(uot=(1.0, 1.0))):
    """KL-relaxed entropic OT.

    The row update is raised to ``rho1 / (rho1 + lam)`` and the column update
    to ``rho2 / (rho2 + lam)``; the plan's total mass is free.
    """
    if cfg.uot is None:
        raise InputError("unbalanced_sinkhorn needs cfg.uot = (rho1, rho2)")
    rho1, rho2 = cfg.uot
    return _plans(C, mu, nu, cfg, (rho1 / (rho1 + cfg.lam), rho2 / (rho2 + cfg.lam)))


def solve(C, mu=None, nu=None, cfg=SinkhornConfig()):
    """Dispatch to the balanced or unbalanced solver from ``cfg``."""
    if cfg.uot is None:
        return sinkhorn(C, mu, nu, cfg)
    return unbalanced_sinkhorn(C, mu, nu, cfg)


def ot_distance(plan, C):
    """Frobenius product ``<T, C>``.

    With a tensor cost the result is a tape tensor and the plan is held
    constant; with an array cost a float is returned.  A list of plans with
    a (B, M, N) tensor cost gives a length-B tensor of distances.
    """
    if isinstance(plan, (list, tuple)):
        T = np.stack([p.T if isinstance(p, TransportPlan) else p for p in plan])
    else:
        T = plan.T if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    if isinstance(C, Tensor):
        if C.shape != T.shape:
            raise InputError(f"plan {T.shape} and cost {C.shape} disagree")
        if C.ndim == 3:
            return (C * T).sum(axis=(1, 2))
        return (C * T).sum()
    C = np.asarray(C, dtype=np.float64)
    if C.shape != T.shape:
        raise InputError(f"plan {T.shape} and cost {C.shape} disagree")
    return float((T * C).sum())


def exact_ot_uniform(C):
    """Exact OT cost for uniform marginals on a square cost, by enumeration.

    With uniform weights the optimum is attained at a permutation, so
    ``min_sigma (1/n) sum_i C[i, sigma(i)]`` is exact.  Limited to n <= 7.
    """
    C = C.data if isinstance(C, Tensor) else np.asarray(C, dtype=np.float64)
    n = C.shape[0]
    if C.ndim != 2 or C.shape[1] != n:
        raise InputError(f"exact_ot_uniform needs a square cost, got {C.shape}")
    if n > EXACT_MAX_N:
        raise InputError(f"exact_ot_uniform enumerates n! permutations; n={n} > {EXACT_MAX_N}")
    rows = np.arange(n)
    best = min(C[rows, list(p)].sum() for p in itertools.permutations(range(n)))
    return float(best) / n
