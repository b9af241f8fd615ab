"""Dense numerics shared by every other module.

Matrices are plain 2-D ``float64`` numpy arrays and parameter vectors are
1-D ``float64`` arrays. Gradients are derived by hand; :func:`grad_check`
is the finite-difference oracle they are tested against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class EvaluationError(RuntimeError):
    """A function under gradient check returned a non-finite value."""


# -- random streams ---------------------------------------------------------

def make_rng(seed: int, *path: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed on ``(seed, *path)``.

    Streams with different paths are statistically independent, so client
    ``k`` can draw from ``make_rng(seed, STREAM, k)`` without caring in which
    order other clients consume theirs.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence([int(seed), *[int(p) for p in path]])
    return np.random.Generator(np.random.Philox(ss))


# -- linear algebra ---------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def logsumexp(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("logsumexp of an empty vector")
    m = float(np.max(v))
    return m + math.log(float(np.sum(np.exp(v - m))))


def logsumexp_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise shift-stable logsumexp of a 2-D array."""
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def softmax_rows(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# -- losses -----------------------------------------------------------------

def softmax_nll(logits, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of one example and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.size:
        raise ValueError(f"label {label} out of range for {logits.size} classes")
    lse = logsumexp(logits)
    loss = lse - float(logits[label])
    grad = np.exp(logits - lse)
    grad[label] -= 1.0
    return loss, grad


def gaussian_kl_diag(mu_p, logvar_p, mu_r, logvar_r):
    """KL(N(mu_p, e^logvar_p) || N(mu_r, e^logvar_r)) for diagonal Gaussians.

    Returns ``(kl, (d_mu_p, d_logvar_p, d_mu_r, d_logvar_r))``.
    """
    arrs = [np.asarray(x, dtype=np.float64) for x in (mu_p, logvar_p, mu_r, logvar_r)]
    if len({a.shape for a in arrs}) != 1:
        raise ValueError(f"length mismatch: {[a.shape for a in arrs]}")
    mp, lp, mr, lr = arrs
    ratio = np.exp(lp - lr)
    diff = mr - mp
    inv_r = np.exp(-lr)
    kl = 0.5 * float(np.sum(ratio + diff**2 * inv_r - 1.0 + lr - lp))
    d_mp = -diff * inv_r
    d_lp = 0.5 * (ratio - 1.0)
    d_mr = diff * inv_r
    d_lr = 0.5 * (1.0 - ratio - diff**2 * inv_r)
    return max(kl, 0.0), (d_mp, d_lp, d_mr, d_lr)


def clamp_logvar(logvar: np.ndarray) -> np.ndarray:
    return np.clip(logvar, LOGVAR_MIN, LOGVAR_MAX)


def reparam_sample(mu, logvar, rng: np.random.Generator):
    """Draw ``z = mu + exp(logvar / 2) * eps``.

    Returns ``(z, eps)``; ``dz/dmu = 1`` and ``dz/dlogvar = (z - mu) / 2``.
    """
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape:
        raise ValueError(f"length mismatch: {mu.shape} vs {logvar.shape}")
    eps = rng.standard_normal(mu.shape)
    z = mu + np.exp(0.5 * clamp_logvar(logvar)) * eps
    return z, eps


# -- optimisation -----------------------------------------------------------

@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")

    @classmethod
    def fresh(cls, n_params: int, learning_rate=0.01, momentum=0.9, weight_decay=1e-5):
        return cls(learning_rate, momentum, weight_decay, np.zeros(n_params))


def sgd_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState) -> np.ndarray:
    """Heavy-ball SGD with coupled L2 weight decay. Updates ``state.velocity`` in place."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError(f"length mismatch: params {params.shape}, grads {grads.shape}")
    if state.velocity.shape != params.shape:
        if state.velocity.size == 0:
            state.velocity = np.zeros_like(params)
        else:
            raise ValueError(
                f"velocity length {state.velocity.size} does not match params {params.size}"
            )
    g = grads + state.weight_decay * params
    state.velocity = state.momentum * state.velocity + g
    return params - state.learning_rate * state.velocity


# -- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray
    tol: float

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    # floor keeps coordinates whose true gradient is ~0 from dividing by noise
    return np.abs(analytic - numeric) / np.maximum(
        np.maximum(np.abs(analytic), np.abs(numeric)), floor
    )


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point,
    h: float = 1e-5,
    tol: float = 1e-6,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare ``f``'s analytic gradient against central differences.

    ``f`` maps a parameter vector to ``(value, gradient)`` and must be
    deterministic.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    p = np.array(point, dtype=np.float64)
    value, analytic = f(p.copy())
    if not np.isfinite(value):
        raise EvaluationError(f"f returned non-finite value {value}")
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.empty_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + h
        fp = f(p.copy())[0]
        p[i] = orig - h
        fm = f(p.copy())[0]
        p[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite value while perturbing coordinate {i}")
        numeric[i] = (fp - fm) / (2.0 * h)
    return GradCheckReport(analytic, numeric, relative_error(analytic, numeric, floor), tol)
