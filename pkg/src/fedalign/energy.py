"""Free energies, source-energy EMAs, the target alignment hinge, and the server step.

With ``E(x, y) = -logit_y`` the free energy of an input is
``F(x) = -logsumexp(logits)`` and the per-example cross-entropy splits as
``E(x, y) - F(x)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, forward, free_energies, mean_free_energy_grad, unflatten
from .numcore import OptimizerState, logsumexp, make_rng, sgd_step
from .protocol import Ledger, MessageKind

STREAM_ENERGY = 21


class StateError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EmaTracker:
    alpha: float = 0.9
    value: float = 0.0
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")


@dataclass
class EnergyReport:
    energies: np.ndarray
    mean: float

    @classmethod
    def of(cls, energies) -> "EnergyReport":
        energies = np.asarray(energies, dtype=np.float64)
        return cls(energies, float(np.mean(energies)))


@dataclass
class GlobalStepRecord:
    round: int
    target_energy: float
    source_energies: list[float]
    emas: list[float]
    fea_loss: float
    stepped: bool


def free_energy(logits) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("free energy of empty logits")
    return -logsumexp(logits)


def nll_energy_identity(logits, label: int) -> tuple[float, float, float]:
    """Return ``(E(x, y), F(x), E - F)``; the last equals the cross-entropy."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.size:
        raise ValueError(f"label {label} out of range for {logits.size} classes")
    e_term = -float(logits[label])
    f_term = free_energy(logits)
    return e_term, f_term, e_term - f_term


def ema_update(tracker: EmaTracker, observation: float) -> EmaTracker:
    observation = float(observation)
    if not np.isfinite(observation):
        raise ValueError(f"non-finite EMA observation {observation}")
    if not tracker.initialized:
        return EmaTracker(tracker.alpha, observation, True)
    a = tracker.alpha
    return EmaTracker(a, a * tracker.value + (1.0 - a) * observation, True)


def _ema_values(source_emas) -> np.ndarray:
    vals = []
    for e in source_emas:
        if isinstance(e, EmaTracker):
            if e.initialized:
                vals.append(e.value)
        else:
            vals.append(float(e))
    return np.asarray(vals, dtype=np.float64)


def fea_loss(target_F, source_emas) -> tuple[float, np.ndarray]:
    """Mean over target samples and sources of ``max(0, F_t - ema_k)``.

    Source EMAs are constants. Returns the loss and ``dloss/dF_t``.
    """
    F = np.asarray(target_F, dtype=np.float64)
    if F.size == 0:
        raise ValueError("empty target batch")
    emas = _ema_values(source_emas)
    if emas.size == 0:
        raise StateError("no initialized source energy estimate")
    gaps = F[:, None] - emas[None, :]
    n, k = gaps.shape
    loss = float(np.maximum(gaps, 0.0).sum() / (n * k))
    dF = (gaps > 0).sum(axis=1) / (n * k)
    return loss, dF.astype(np.float64)


def target_hinge_step(params: ModelParams, x_batch: np.ndarray, source_emas):
    """Client-side: energies of a target batch and the parameter gradient of the hinge."""
    trace = forward(params, x_batch, mode="eval")
    F = free_energies(trace.logits)
    loss, dF = fea_loss(F, source_emas)
    return F, loss, mean_free_energy_grad(params, trace, dF)


def _draw_batch(n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(n, size=min(size, n), replace=False))


@dataclass
class ServerState:
    global_params: np.ndarray
    config: object  # ModelConfig
    round: int = 0
    source_emas: list[EmaTracker] = field(default_factory=list)
    energy_log: list[GlobalStepRecord] = field(default_factory=list)


def global_optimize(server: ServerState, sources, target, config, ledger: Ledger) -> ServerState:
    """One privacy-preserving alignment update of the global model.

    1. The target receives the model and current source EMAs, computes the
       hinge gradient on an unlabeled batch, and returns energies plus gradient.
    2. Each source receives the model and returns its batch-mean free energy;
       the server folds it into that source's EMA.
    3. The server takes one SGD step on ``lambda_fea * gradient``.

    ``sources``/``target`` expose ``.id`` and ``.dataset``.
    """
    rnd = server.round
    mcfg = server.config
    theta = server.global_params
    tgt_pool = target.dataset.unlabeled_indices
    if tgt_pool.size == 0:
        raise ConfigError("target client has no unlabeled data")

    # (1) target
    tid = f"target_{target.id}"
    local_theta = ledger.to_client(MessageKind.PARAM_VECTOR, tid, theta, rnd)
    initialized = [e for e in server.source_emas if e.initialized]
    ema_vals = ledger.to_client(MessageKind.ENERGY_SCALARS, tid, [e.value for e in initialized], rnd)
    t_rng = make_rng(config.seed, STREAM_ENERGY, 1000 + target.id, rnd)
    idx = tgt_pool[_draw_batch(tgt_pool.size, config.target_batch, t_rng)]
    x_t = target.dataset.features[idx]
    local_params = unflatten(mcfg, local_theta)
    if ema_vals.size:
        F_t, loss, grad = target_hinge_step(local_params, x_t, ema_vals)
        grad = ledger.to_server(MessageKind.GRAD_VECTOR, tid, grad, rnd)
    else:
        F_t = free_energies(forward(local_params, x_t, mode="eval").logits)
        loss, grad = 0.0, None
    F_t = ledger.to_server(MessageKind.ENERGY_SCALARS, tid, F_t, rnd)

    # (2) sources
    source_means = []
    new_emas = list(server.source_emas)
    for k, src in enumerate(sources):
        sid = f"client_{src.id}"
        p = unflatten(mcfg, ledger.to_client(MessageKind.PARAM_VECTOR, sid, theta, rnd))
        s_rng = make_rng(config.seed, STREAM_ENERGY, src.id, rnd)
        x_s = src.dataset.features[_draw_batch(len(src.dataset), config.target_batch, s_rng)]
        mean_F = float(np.mean(free_energies(forward(p, x_s, mode="eval").logits)))
        mean_F = float(ledger.to_server(MessageKind.ENERGY_SCALARS, sid, [mean_F], rnd)[0])
        source_means.append(mean_F)
        new_emas[k] = ema_update(new_emas[k], mean_F)

    # (3) server step
    stepped = False
    new_theta = theta
    if grad is not None and config.lambda_fea > 0 and np.any(grad != 0):
        opt = OptimizerState.fresh(
            theta.size, config.learning_rate, config.momentum, config.weight_decay
        )
        new_theta = sgd_step(theta, config.lambda_fea * grad, opt)
        stepped = True

    log = server.energy_log + [GlobalStepRecord(
        rnd, float(np.mean(F_t)), source_means, [e.value for e in new_emas], loss, stepped
    )]
    return ServerState(new_theta, mcfg, rnd, new_emas, log)
