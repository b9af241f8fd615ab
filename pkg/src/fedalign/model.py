"""MLP encoder with a Gaussian latent head, class prototypes and a linear classifier.

Forward pass::

    x -> [Linear, ReLU]* -> Linear -> (mu, logvar) -> z -> Linear -> logits

In train mode ``z`` is a reparameterised sample, in eval mode ``z = mu``.
Each class ``y`` owns a reference Gaussian ``(proto_mu[y], proto_logvar[y])``
that the conditional-information penalty pulls ``p(z|x)`` towards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    ShapeError,
    clamp_logvar,
    logsumexp_rows,
    softmax_rows,
)


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (32,)
    latent_dim: int = 8
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.latent_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"all dimensions must be >= 1: {self}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) of every dense layer: encoder, latent head, classifier."""
        dims = [self.input_dim, *self.hidden_dims]
        shapes = list(zip(dims[:-1], dims[1:]))
        shapes.append((dims[-1], 2 * self.latent_dim))
        shapes.append((self.latent_dim, self.num_classes))
        return shapes

    @property
    def num_params(self) -> int:
        dense = sum(i * o + o for i, o in self.layer_shapes())
        return dense + 2 * self.num_classes * self.latent_dim


@dataclass(frozen=True)
class LossLambdas:
    lambda_l2: float = 0.01
    lambda_cmi: float = 0.001

    def __post_init__(self):
        if self.lambda_l2 < 0 or self.lambda_cmi < 0:
            raise ValueError("loss scaling factors must be nonnegative")


@dataclass
class ModelParams:
    config: ModelConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    proto_mu: np.ndarray
    proto_logvar: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out + [self.proto_mu, self.proto_logvar]

    def copy(self) -> "ModelParams":
        return unflatten(self.config, flatten(self))


@dataclass
class ForwardTrace:
    x: np.ndarray
    pre: list[np.ndarray]  # hidden pre-activations
    post: list[np.ndarray]  # hidden post-activations (post[0] is x)
    head_raw: np.ndarray  # unclamped (mu | logvar)
    mu: np.ndarray
    logvar: np.ndarray  # clamped
    eps: np.ndarray | None
    z: np.ndarray
    logits: np.ndarray
    mode: str = "train"


@dataclass
class LossComponents:
    nll: float
    l2: float
    cmi: float
    extras: dict = field(default_factory=dict)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    weights, biases = [], []
    for fan_in, fan_out in config.layer_shapes():
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    proto_mu = rng.standard_normal((config.num_classes, config.latent_dim))
    proto_logvar = np.zeros((config.num_classes, config.latent_dim))
    return ModelParams(config, weights, biases, proto_mu, proto_logvar)


def flatten(params: ModelParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays()]).astype(np.float64, copy=False)


def unflatten(config: ModelConfig, vec, copy: bool = True) -> ModelParams:
    """Inverse of :func:`flatten`. With ``copy=False`` the arrays are views into ``vec``."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.size != config.num_params:
        raise ValueError(f"expected {config.num_params} parameters, got shape {vec.shape}")
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        out = vec[pos:pos + n].reshape(shape)
        if copy:
            out = out.copy()
        pos += n
        return out

    weights, biases = [], []
    for fan_in, fan_out in config.layer_shapes():
        weights.append(take((fan_in, fan_out)))
        biases.append(take((fan_out,)))
    proto_shape = (config.num_classes, config.latent_dim)
    proto_mu = take(proto_shape)
    proto_logvar = take(proto_shape)
    return ModelParams(config, weights, biases, proto_mu, proto_logvar)


def forward(
    params: ModelParams,
    x: np.ndarray,
    rng: np.random.Generator | None = None,
    mode: str = "train",
) -> ForwardTrace:
    cfg = params.config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ShapeError(f"input batch {x.shape} does not match input_dim {cfg.input_dim}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    n_hidden = len(cfg.hidden_dims)
    h = x
    pre, post = [], [x]
    for i in range(n_hidden):
        a = h @ params.weights[i] + params.biases[i]
        h = np.maximum(a, 0.0)
        pre.append(a)
        post.append(h)

    head_raw = h @ params.weights[n_hidden] + params.biases[n_hidden]
    L = cfg.latent_dim
    mu = head_raw[:, :L]
    logvar = clamp_logvar(head_raw[:, L:])
    if mode == "train":
        if rng is None:
            raise ValueError("train mode needs an rng for the latent sample")
        eps = rng.standard_normal(mu.shape)
        z = mu + np.exp(0.5 * logvar) * eps
    else:
        eps = None
        z = mu
    logits = z @ params.weights[-1] + params.biases[-1]
    return ForwardTrace(x, pre, post, head_raw, mu, logvar, eps, z, logits, mode)


def free_energies(logits: np.ndarray) -> np.ndarray:
    """Per-row free energy ``-logsumexp(logits)``."""
    return -logsumexp_rows(logits)


def backward(
    params: ModelParams,
    trace: ForwardTrace,
    d_logits: np.ndarray | None = None,
    d_z: np.ndarray | None = None,
    d_mu: np.ndarray | None = None,
    d_logvar: np.ndarray | None = None,
) -> list[np.ndarray]:
    """Backpropagate upstream gradients into per-array parameter gradients.

    Gradients are returned in :meth:`ModelParams.arrays` order, with the
    prototype slots zero (callers add their own prototype terms).
    """
    cfg = params.config
    n_hidden = len(cfg.hidden_dims)
    L = cfg.latent_dim
    n = trace.x.shape[0]

    dW = [None] * len(params.weights)
    db = [None] * len(params.biases)

    d_z = np.zeros((n, L)) if d_z is None else d_z.copy()
    if d_logits is not None:
        dW[-1] = trace.z.T @ d_logits
        db[-1] = d_logits.sum(axis=0)
        d_z += d_logits @ params.weights[-1].T
    else:
        dW[-1] = np.zeros_like(params.weights[-1])
        db[-1] = np.zeros_like(params.biases[-1])

    g_mu = d_z.copy()
    g_lv = np.zeros((n, L))
    if trace.mode == "train":
        g_lv += d_z * 0.5 * (trace.z - trace.mu)
    if d_mu is not None:
        g_mu += d_mu
    if d_logvar is not None:
        g_lv += d_logvar
    # clamp passes gradient only inside the open interval
    raw_lv = trace.head_raw[:, L:]
    g_lv = g_lv * ((raw_lv > LOGVAR_MIN) & (raw_lv < LOGVAR_MAX))
    d_head = np.concatenate([g_mu, g_lv], axis=1)

    h_in = trace.post[-1]
    dW[n_hidden] = h_in.T @ d_head
    db[n_hidden] = d_head.sum(axis=0)
    d_h = d_head @ params.weights[n_hidden].T

    for i in range(n_hidden - 1, -1, -1):
        d_a = d_h * (trace.pre[i] > 0)
        dW[i] = trace.post[i].T @ d_a
        db[i] = d_a.sum(axis=0)
        if i > 0:
            d_h = d_a @ params.weights[i].T

    grads = []
    for w, b in zip(dW, db):
        grads += [w, b]
    grads += [np.zeros_like(params.proto_mu), np.zeros_like(params.proto_logvar)]
    return grads


def _concat(grads: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads])


def client_loss(
    params: ModelParams,
    trace: ForwardTrace,
    labels,
    lambdas: LossLambdas,
) -> tuple[float, LossComponents, np.ndarray]:
    """Local objective ``nll + lambda_l2 * l2 + lambda_cmi * cmi`` with its exact gradient.

    * ``nll`` is the batch-mean softmax cross-entropy,
    * ``l2`` is the batch-mean squared norm of the (sampled) latent,
    * ``cmi`` is the batch-mean KL from ``p(z|x)`` to the true class prototype.
    """
    cfg = params.config
    labels = np.asarray(labels, dtype=np.int64)
    n = trace.x.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= cfg.num_classes):
        raise ValueError(f"labels must lie in [0, {cfg.num_classes})")
    rows = np.arange(n)

    lse = logsumexp_rows(trace.logits)
    nll = float(np.mean(lse - trace.logits[rows, labels]))
    d_logits = softmax_rows(trace.logits)
    d_logits[rows, labels] -= 1.0
    d_logits /= n

    z = trace.z
    l2 = float(np.mean(np.sum(z * z, axis=1)))
    d_z = (2.0 * lambdas.lambda_l2 / n) * z

    p_mu_r = params.proto_mu[labels]
    p_lv_raw = params.proto_logvar[labels]
    p_lv_r = clamp_logvar(p_lv_raw)
    ratio = np.exp(trace.logvar - p_lv_r)
    diff = p_mu_r - trace.mu
    inv_r = np.exp(-p_lv_r)
    kl_rows = 0.5 * np.sum(ratio + diff**2 * inv_r - 1.0 + p_lv_r - trace.logvar, axis=1)
    cmi = float(max(np.mean(kl_rows), 0.0))
    scale = lambdas.lambda_cmi / n
    d_mu = scale * (-diff * inv_r)
    d_logvar = scale * 0.5 * (ratio - 1.0)
    d_proto_mu_rows = scale * diff * inv_r
    d_proto_lv_rows = scale * 0.5 * (1.0 - ratio - diff**2 * inv_r)
    d_proto_lv_rows *= (p_lv_raw > LOGVAR_MIN) & (p_lv_raw < LOGVAR_MAX)

    grads = backward(params, trace, d_logits=d_logits, d_z=d_z, d_mu=d_mu, d_logvar=d_logvar)
    np.add.at(grads[-2], labels, d_proto_mu_rows)
    np.add.at(grads[-1], labels, d_proto_lv_rows)

    total = nll + lambdas.lambda_l2 * l2 + lambdas.lambda_cmi * cmi
    return total, LossComponents(nll, l2, cmi), _concat(grads)


def mean_free_energy_grad(params: ModelParams, trace: ForwardTrace, weights: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_t weights[t] * F(x_t)`` with respect to the flat parameters."""
    d_logits = -softmax_rows(trace.logits) * np.asarray(weights, dtype=np.float64)[:, None]
    return _concat(backward(params, trace, d_logits=d_logits))


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return forward(params, x, mode="eval").logits
