"""Self-check battery run by ``fedalign verify``.

Each check returns a :class:`CheckResult`; the CLI exits non-zero if any fails.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import al, energy, fed
from .model import (
    LossLambdas,
    ModelConfig,
    backward,
    client_loss,
    flatten,
    forward,
    init_params,
    mean_free_energy_grad,
    unflatten,
)
from .numcore import grad_check, make_rng, softmax_nll

GRAD_TOL = 1e-4
SEEDS = (0, 1, 2, 3, 4)
TINY = ModelConfig(input_dim=3, hidden_dims=(4,), latent_dim=2, num_classes=3)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<36s} {self.value:.3e}  {self.detail}"


LossFn = Callable[..., tuple]


def _tiny_problem(seed: int, n: int = 8):
    rng = make_rng(seed, 7)
    params = init_params(TINY, rng)
    params.proto_logvar = 0.5 * rng.standard_normal(params.proto_logvar.shape)
    x = rng.standard_normal((n, TINY.input_dim))
    y = rng.integers(0, TINY.num_classes, n)
    return params, x, y


def client_loss_gradcheck(seed: int, lambdas: LossLambdas, loss_fn: LossFn = client_loss):
    params, x, y = _tiny_problem(seed)

    def f(vec):
        p = unflatten(TINY, vec)
        trace = forward(p, x, make_rng(seed, 99), "train")
        total, _, grad = loss_fn(p, trace, y, lambdas)
        return total, grad

    return grad_check(f, flatten(params), h=1e-5, tol=GRAD_TOL)


def hinge_gradcheck(seed: int):
    """Gradient of the alignment hinge through the global parameters, hinge active."""
    params, x, _ = _tiny_problem(seed, n=8)
    F0 = energy.free_energies(forward(params, x, mode="eval").logits)
    # one reference below every energy, one halfway between two distinct
    # neighbours: hinges are active but no sample sits on a kink. Dead ReLUs can
    # make energies tie exactly, so neighbours are taken among distinct values.
    Fs = np.unique(F0)
    mid = len(Fs) // 2
    emas = [float(Fs[0]) - 0.5, float(0.5 * (Fs[mid - 1] + Fs[mid]))]

    def f(vec):
        p = unflatten(TINY, vec)
        F, loss, grad = energy.target_hinge_step(p, x, emas)
        return loss, grad

    return grad_check(f, flatten(params), h=1e-5, tol=GRAD_TOL)


def energy_nll_gradcheck(seed: int):
    """Cross-entropy written as mean ``E(x, y) - F(x)``, each term differentiated on its own."""
    params, x, y = _tiny_problem(seed)
    n = len(y)
    onehot = np.eye(TINY.num_classes)[y]

    def f(vec):
        p = unflatten(TINY, vec)
        trace = forward(p, x, mode="eval")
        loss = float(np.mean([energy.nll_energy_identity(l, int(c))[2] for l, c in zip(trace.logits, y)]))
        g_e = np.concatenate([a.ravel() for a in backward(p, trace, d_logits=-onehot / n)])
        g_f = mean_free_energy_grad(p, trace, np.full(n, 1.0 / n))
        return loss, g_e - g_f

    return grad_check(f, flatten(params), h=1e-5, tol=GRAD_TOL)


LOSS_TERMS = {
    "nll": LossLambdas(0.0, 0.0),
    "l2": LossLambdas(1.0, 0.0),
    "cmi": LossLambdas(0.0, 1.0),
    "full": LossLambdas(0.01, 0.001),
}


def check_gradients(loss_fn: LossFn = client_loss) -> list[CheckResult]:
    out = []
    for term, lambdas in LOSS_TERMS.items():
        worst = max(client_loss_gradcheck(s, lambdas, loss_fn).max_rel_error for s in SEEDS)
        out.append(CheckResult(f"grad client_loss[{term}]", worst < GRAD_TOL, worst,
                               f"max rel err over {len(SEEDS)} seeds, tol {GRAD_TOL:g}"))
    worst = max(energy_nll_gradcheck(s).max_rel_error for s in SEEDS)
    out.append(CheckResult("grad energy-form nll", worst < GRAD_TOL, worst,
                           f"max rel err over {len(SEEDS)} seeds, tol {GRAD_TOL:g}"))
    worst = max(hinge_gradcheck(s).max_rel_error for s in SEEDS)
    out.append(CheckResult("grad fea hinge", worst < GRAD_TOL, worst,
                           f"max rel err over {len(SEEDS)} seeds, tol {GRAD_TOL:g}"))
    return out


def check_energy_identity(n: int = 10_000) -> CheckResult:
    rng = make_rng(0, 8)
    worst = 0.0
    for _ in range(n):
        c = int(rng.integers(2, 10))
        logits = rng.normal(0.0, 5.0, c)
        y = int(rng.integers(0, c))
        _, _, loss = energy.nll_energy_identity(logits, y)
        worst = max(worst, abs(loss - softmax_nll(logits, y)[0]))
    return CheckResult("energy form of nll", worst <= 1e-12, worst, f"{n} random pairs")


def check_aggregation() -> list[CheckResult]:
    exact = fed.aggregate([np.array([1.0, 3.0]), np.array([5.0, 7.0])], [1, 3])
    err0 = float(np.max(np.abs(exact - np.array([4.0, 6.0]))))
    rng = make_rng(0, 9)
    P = rng.standard_normal((5, 50))
    sizes = rng.integers(1, 100, 5)
    got = fed.aggregate(list(P), list(sizes))
    oracle = np.array([sum(int(s) * P[k, j] for k, s in enumerate(sizes)) / int(sizes.sum())
                       for j in range(P.shape[1])])
    err1 = float(np.max(np.abs(got - oracle)))
    wsum = abs(float(fed.aggregation_weights(sizes).sum()) - 1.0)
    return [
        CheckResult("aggregate [1,3]/[5,7] sizes 1/3", err0 == 0.0, err0, "expects [4, 6]"),
        CheckResult("aggregate vs weighted mean", err1 <= 1e-12, err1, "5 clients, 50 params"),
        CheckResult("aggregation weights sum", wsum <= 1e-12, wsum),
    ]


def check_hinge_and_ema() -> list[CheckResult]:
    rng = make_rng(0, 10)
    worst_neg, worst_zero, worst_convex = 0.0, 0.0, 0.0
    for _ in range(500):
        F = rng.normal(size=int(rng.integers(1, 20)))
        emas = list(rng.normal(size=int(rng.integers(1, 5))))
        loss, _ = energy.fea_loss(F, emas)
        worst_neg = max(worst_neg, -loss)
        if np.all(F[:, None] <= np.asarray(emas)[None, :]):
            worst_zero = max(worst_zero, abs(loss))
        tr = energy.EmaTracker(float(rng.uniform(0, 0.99)), float(rng.normal()), True)
        obs = float(rng.normal())
        new = energy.ema_update(tr, obs).value
        lo, hi = min(tr.value, obs), max(tr.value, obs)
        worst_convex = max(worst_convex, lo - new, new - hi)
    loss, _ = energy.fea_loss([0.0, 1.0], [0.5, -0.5])
    return [
        CheckResult("fea hinge nonnegative", worst_neg <= 0.0, max(worst_neg, 0.0)),
        CheckResult("fea hinge zero when satisfied", worst_zero == 0.0, worst_zero),
        CheckResult("fea two-by-two enumeration", abs(loss - 0.625) < 1e-15, abs(loss - 0.625)),
        CheckResult("ema convex combination", worst_convex <= 1e-15, max(worst_convex, 0.0)),
    ]


def _emd_bruteforce(a: np.ndarray, b: np.ndarray) -> float:
    n = a.shape[0]
    best = np.inf
    for perm in itertools.permutations(range(n)):
        best = min(best, float(np.mean(np.linalg.norm(a - b[list(perm)], axis=1))))
    return best


def check_emd() -> list[CheckResult]:
    rng = make_rng(0, 11)
    worst_brute, worst_sym, worst_tri, worst_self = 0.0, 0.0, 0.0, 0.0
    for _ in range(20):
        n = int(rng.integers(1, 6))
        a, b, c = (rng.normal(size=(n, 2)) for _ in range(3))
        ab, ba = al.emd(a, b), al.emd(b, a)
        worst_brute = max(worst_brute, abs(ab - _emd_bruteforce(a, b)))
        worst_sym = max(worst_sym, abs(ab - ba))
        worst_tri = max(worst_tri, ab - (al.emd(a, c) + al.emd(c, b)))
        worst_self = max(worst_self, al.emd(a, a[rng.permutation(n)]))
    return [
        CheckResult("emd vs permutation brute force", worst_brute <= 1e-12, worst_brute),
        CheckResult("emd symmetric", worst_sym <= 1e-12, worst_sym),
        CheckResult("emd triangle inequality", worst_tri <= 1e-12, max(worst_tri, 0.0)),
        CheckResult("emd zero on permuted copy", worst_self <= 1e-12, worst_self),
    ]


def run_all(loss_fn: LossFn = client_loss) -> list[CheckResult]:
    results = check_gradients(loss_fn)
    results.append(check_energy_identity())
    results += check_aggregation()
    results += check_hinge_and_ema()
    results += check_emd()
    return results
